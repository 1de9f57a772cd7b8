import pytest
from hypothesis import given, settings, strategies as st

from hisir.config import PRESETS, RunConfig, emit_config, load_config, parse_config


def test_defaults():
    cfg = RunConfig()
    assert (cfg.patch_size, cfg.batch, cfg.seed, cfg.lam, cfg.gamma, cfg.t_diff) == (128, 128, 42, 0.1, 0.1, 0.1)


def test_emit_parse_round_trip():
    for name in PRESETS:
        cfg = load_config(preset=name)
        assert parse_config(emit_config(cfg)) == cfg


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from([8, 16, 64, 128]),
    st.floats(1e-5, 1e-1),
    st.sampled_from(["rops", "average"]),
    st.sampled_from(["learned", "open", "closed"]),
    st.integers(0, 10_000),
)
def test_round_trip_property(patch, lr, merge, gate, seed):
    cfg = RunConfig(patch_size=patch, lr=lr, merge=merge, gate=gate, seed=seed)
    assert parse_config(emit_config(cfg)) == cfg


def test_comments_blank_lines_and_base():
    text = "# run\n\nepochs = 3   # short\nmerge=average\n"
    cfg = parse_config(text, RunConfig(seed=7))
    assert (cfg.epochs, cfg.merge, cfg.seed) == (3, "average", 7)


@pytest.mark.parametrize(
    "text, exc",
    [("nonsense = 1", KeyError), ("epochs 3", ValueError), ("epochs = three", ValueError), ("t_diff = -1", ValueError),
     ("patch_size = 12", ValueError), ("merge = median", ValueError), ("gate = half", ValueError)],
)
def test_bad_config_text(text, exc):
    with pytest.raises(exc):
        parse_config(text)


def test_load_config_layers(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epochs = 5\nlr = 0.01\n")
    cfg = load_config(path, "desk", {"lr": "0.02", "seed": None})
    assert cfg.board_size == 512 and cfg.epochs == 5 and cfg.lr == 0.02 and cfg.seed == 42
