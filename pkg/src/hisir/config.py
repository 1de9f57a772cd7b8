"""Run configuration: ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["RunConfig", "PRESETS", "parse_config", "emit_config", "load_config"]


@dataclass(frozen=True)
class RunConfig:
    # model / optimisation
    patch_size: int = 128
    batch: int = 128
    seed: int = 42
    lam: float = 0.1
    gamma: float = 0.1
    dice_eps: float = 1.0
    epochs: int = 20
    lr: float = 1e-3
    patches_per_image: int = 48
    # merge / evaluation
    t_diff: float = 0.1
    cell_score: str = "max_pixel"
    merge: str = "rops"  # or "average"
    gate: str = "learned"  # or "open" / "closed"
    theta: float = 0.5
    min_area: int = 4
    fpr_cap: float = 0.3
    # synthetic data
    board_size: int = 1024
    n_normal: int = 450
    n_test: int = 50
    n_good: int = 50
    defects_per_board: int = 6
    component_count: int = 96
    trace_count: int = 64
    pad_count: int = 96
    # runtime
    threads: int = 1

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name not in ("seed", "epochs", "n_good"):
                if v <= 0:
                    raise ValueError(f"{f.name} must be positive, got {v}")
        if self.epochs < 0 or self.n_good < 0 or self.seed < 0:
            raise ValueError("epochs, n_good and seed must be non-negative")
        if self.patch_size % 8:
            raise ValueError("patch_size must be a multiple of 8")
        if self.cell_score not in ("max_pixel", "mean_pixel"):
            raise ValueError(f"unknown cell_score {self.cell_score!r}")
        if self.merge not in ("rops", "average"):
            raise ValueError(f"unknown merge {self.merge!r}")
        if self.gate not in ("learned", "open", "closed"):
            raise ValueError(f"unknown gate {self.gate!r}")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "full": {},
    "desk": dict(
        board_size=512, patch_size=64, batch=16, epochs=20, n_normal=64, n_test=16, n_good=16,
        defects_per_board=4, component_count=24, trace_count=16, pad_count=24,
        patches_per_image=128, lr=2e-3,
    ),
}


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if name not in kinds:
        raise KeyError(f"unknown config key {name!r}")
    kind = kinds[name]
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, val)
    return (base or RunConfig()).replace(**values)


def emit_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)!r}\n".replace("'", "") for f in fields(cfg))


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if preset:
        cfg = cfg.replace(**PRESETS[preset])
    if path:
        cfg = parse_config(Path(path).read_text(), cfg)
    if overrides:
        cfg = cfg.replace(**{k: _coerce(k, str(v)) for k, v in overrides.items() if v is not None})
    return cfg
