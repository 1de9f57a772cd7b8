import numpy as np
import pytest

from hisir import nnet
from hisir.gradcheck import grad_check
from hisir.losses import LossWeights
from hisir.model import Batch, positional_at


def _conv_oracle(x, w, b):
    """Direct 3x3 stride-2 convolution with zero padding, one output at a time."""
    n, h, wd, c = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h // 2, wd // 2, cout))
    for s in range(n):
        for i in range(h // 2):
            for j in range(wd // 2):
                for o in range(cout):
                    out[s, i, j, o] = np.sum(xp[s, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :] * w[:, :, :, o]) + b[o]
    return out


def _deconv_oracle(x, w, b):
    """Scatter-add definition of a 4x4 stride-2 padding-1 transposed convolution."""
    n, h, wd, c = x.shape
    cout = w.shape[3]
    full = np.zeros((n, 2 * h + 2, 2 * wd + 2, cout))
    for s in range(n):
        for i in range(h):
            for j in range(wd):
                for ki in range(4):
                    for kj in range(4):
                        full[s, 2 * i + ki, 2 * j + kj] += x[s, i, j] @ w[ki, kj]
    return full[:, 1:-1, 1:-1] + b


def test_conv_on_ramp_matches_direct_oracle():
    # 5x5 ramp padded to the even size the stride-2 layer needs
    ramp = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1) / 24.0
    x = np.pad(ramp, ((0, 0), (0, 1), (0, 1), (0, 0)))
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 3, 1, 2))
    b = np.array([0.1, -0.2])
    y, _ = nnet.conv2d_s2(x, w, b)
    assert np.max(np.abs(y - _conv_oracle(x, w, b))) < 1e-6


def test_conv_multichannel_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 8, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    y, _ = nnet.conv2d_s2(x, w, b)
    assert np.max(np.abs(y - _conv_oracle(x, w, b))) < 1e-12


def test_deconv_matches_scatter_add_exactly():
    x = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])  # 1 x 2 x 2 x 1
    w = np.arange(16, dtype=np.float64).reshape(4, 4, 1, 1)
    b = np.array([0.5])
    assert np.array_equal(nnet.deconv2d_s2(x, w, b), _deconv_oracle(x, w, b))


def test_deconv_multichannel_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 2, 3))
    w = rng.normal(size=(4, 4, 3, 2))
    b = rng.normal(size=2)
    assert np.max(np.abs(nnet.deconv2d_s2(x, w, b) - _deconv_oracle(x, w, b))) < 1e-12


def test_layer_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    dy = rng.normal(size=(1, 2, 2, 3))
    y, cols = nnet.conv2d_s2(x, w, b)
    dx, dw, _ = nnet.conv2d_s2_backward(dy, cols, w, x.shape)
    h = 1e-6
    e = np.zeros_like(x)
    e[0, 1, 2, 1] = h
    num = (np.sum(nnet.conv2d_s2(x + e, w, b)[0] * dy) - np.sum(nnet.conv2d_s2(x - e, w, b)[0] * dy)) / (2 * h)
    assert dx[0, 1, 2, 1] == pytest.approx(num, rel=1e-7)
    xd = rng.normal(size=(1, 2, 2, 3))
    wd = rng.normal(size=(4, 4, 3, 2))
    dyd = rng.normal(size=(1, 4, 4, 2))
    _, dwd, _ = nnet.deconv2d_s2_backward(dyd, xd, wd)
    e = np.zeros_like(wd)
    e[2, 1, 0, 1] = h
    num = (np.sum(nnet.deconv2d_s2(xd, wd + e, np.zeros(2)) * dyd) - np.sum(nnet.deconv2d_s2(xd, wd - e, np.zeros(2)) * dyd)) / (2 * h)
    assert dwd[2, 1, 0, 1] == pytest.approx(num, rel=1e-7)


def test_encoder_output_shape():
    state = nnet.init_state(7, 0)
    z = nnet.encode(state.params, np.zeros((1, 32, 32, 7), np.float32))
    assert z.shape == (1, 4, 4, 64)


@pytest.mark.parametrize("size", [8, 16, 64])
def test_decoders_restore_spatial_dims(size):
    state = nnet.init_state(7, 0)
    recon, gate, _ = nnet.forward(state, np.zeros((2, size, size, 7), np.float32))
    assert recon.shape == (2, size, size, 3)
    assert gate.shape == (2, size, size, 1)


def test_zero_weights_bias_passthrough():
    state = nnet.init_state(7, 0, dtype=np.float64)
    p = state.params
    for k in p:
        p[k][...] = 0.0
    p["enc1.b"][...] = np.linspace(-1, 1, 16)
    x = np.zeros((1, 16, 16, 7))
    cache = nnet.Cache(x)
    nnet.encode(p, x, cache)
    first = nnet._lrelu(nnet.conv2d_s2(x, p["enc1.w"], p["enc1.b"])[0])
    expect = np.where(p["enc1.b"] > 0, p["enc1.b"], 0.1 * p["enc1.b"])
    assert np.allclose(first, expect)
    recon, gate, _ = nnet.forward(state, x)
    assert np.all(recon == 0.5) and np.all(gate == 0.5)


def test_sigmoid_codomain():
    x = np.array([-30.0, -5.0, 0.0, 5.0, 30.0])
    s = nnet.sigmoid(x)
    assert s[2] == 0.5
    assert np.all((s > 0) & (s < 1))
    assert np.all(np.diff(s) > 0)


def test_backward_without_cache_raises():
    state = nnet.init_state(7, 0)
    with pytest.raises(RuntimeError):
        nnet.backward(state, None, np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 8, 1)))


def test_gradients_scale_linearly():
    state = nnet.init_state(7, 1, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((2, 16, 16, 7))
    d_r = rng.normal(size=(2, 16, 16, 3))
    d_g = rng.normal(size=(2, 16, 16, 1))
    _, _, cache = nnet.forward(state, x)
    g1 = nnet.backward(state, cache, d_r, d_g)
    g2 = nnet.backward(state, cache, 2 * d_r, 2 * d_g)
    for k in g1:
        assert np.array_equal(2 * g1[k], g2[k])


def test_dead_mask_path_has_zero_gradient():
    state = nnet.init_state(7, 1, dtype=np.float64)
    x = np.random.default_rng(0).random((1, 16, 16, 7))
    _, _, cache = nnet.forward(state, x)
    grads = nnet.backward(state, cache, np.ones((1, 16, 16, 3)), np.zeros((1, 16, 16, 1)))
    for k, g in grads.items():
        if k.startswith("msk"):
            assert not np.any(g)
        if k.startswith("rec"):
            assert np.any(g)


# --- optimiser ----------------------------------------------------------------


def _scalar_state(value=0.0):
    return nnet.ModelState({"p": np.array([value], dtype=np.float64)})


def test_adam_zero_gradient_is_a_no_op():
    state = _scalar_state(1.5)
    nnet.adam_step(state, {"p": np.zeros(1)}, lr=0.1)
    assert state.params["p"][0] == 1.5
    assert state.step == 1


@pytest.mark.parametrize("g", [3.0, -0.25, 1e-3])
def test_adam_first_step_closed_form(g):
    lr = 0.01
    state = _scalar_state()
    nnet.adam_step(state, {"p": np.array([g])}, lr=lr)
    # m_hat = g, v_hat = g^2  ->  step = -lr * g / (|g| + eps)
    expect = -lr * g / (abs(g) + 1e-8)
    assert state.params["p"][0] == pytest.approx(expect, rel=1e-12)
    assert abs(state.params["p"][0]) < lr


def test_adam_rejects_non_finite_gradient_with_name():
    state = _scalar_state()
    with pytest.raises(nnet.TrainingError, match="p"):
        nnet.adam_step(state, {"p": np.array([np.nan])}, lr=0.01)


def test_adam_is_deterministic():
    def run():
        state = nnet.init_state(7, 3)
        x = np.random.default_rng(0).random((2, 16, 16, 7)).astype(np.float32)
        for _ in range(3):
            recon, gate, cache = nnet.forward(state, x)
            nnet.adam_step(state, nnet.backward(state, cache, recon - x[..., :3], gate - 0.5), 1e-3)
        return state

    a, b = run(), run()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.v[k].tobytes() == b.v[k].tobytes()


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    state = nnet.init_state(7, 9)
    x = np.random.default_rng(0).random((1, 16, 16, 7)).astype(np.float32)
    recon, gate, cache = nnet.forward(state, x)
    nnet.adam_step(state, nnet.backward(state, cache, recon, gate), 1e-3)
    path = tmp_path / "a.ckpt"
    nnet.save_checkpoint(state, path)
    loaded = nnet.load_checkpoint(path)
    assert loaded.step == state.step
    for k in state.params:
        assert loaded.params[k].tobytes() == state.params[k].tobytes()
        assert loaded.m[k].tobytes() == state.m[k].tobytes()
        assert loaded.v[k].tobytes() == state.v[k].tobytes()
    again = tmp_path / "b.ckpt"
    nnet.save_checkpoint(loaded, again)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"something else\n")
    with pytest.raises(ValueError):
        nnet.load_checkpoint(bad)


# --- gradient check -----------------------------------------------------------


def _batch(seed, size=16, n=2):
    rng = np.random.default_rng(seed)
    target = rng.random((n, size, size, 3))
    inp = target.copy()
    inp[:, 4:9, 5:11] = rng.random((n, 5, 6, 3))
    mask = np.zeros((n, size, size))
    mask[:, 4:9, 5:11] = 1.0
    pos = np.stack([positional_at(8 * i, 0, size, 64, 64, dtype=np.float64) for i in range(n)])
    return Batch(inp, target, mask, pos)


def test_grad_check_composite():
    state = nnet.init_state(7, 4, dtype=np.float64)
    report = grad_check(state, _batch(0), LossWeights(lam=0.1, gamma=0.1))
    assert report.max_rel_err < 1e-4


def test_grad_check_pure_mse():
    state = nnet.init_state(7, 5, dtype=np.float64)
    report = grad_check(state, _batch(1), LossWeights(lam=0.0, gamma=0.0), h=1e-4)
    assert report.max_rel_err < 1e-6


def test_grad_check_is_reproducible():
    state = nnet.init_state(7, 6, dtype=np.float64)
    a = grad_check(state, _batch(2), LossWeights(), per_group=2)
    b = grad_check(state, _batch(2), LossWeights(), per_group=2)
    assert a.max_rel_err == b.max_rel_err
    assert a.per_group == b.per_group
