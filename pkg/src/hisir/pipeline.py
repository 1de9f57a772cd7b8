"""Dataset synthesis, training, full-image inference and suite evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evalkit, imaging, nnet, synthboard
from .config import RunConfig, emit_config
from .losses import LossWeights
from .model import POS_CHANNELS, infer_patches, positional_at, positional_channels, train_objective
from .rops import MergeConfig, average_merge, rops_merge, stitch_gates

log = logging.getLogger("hisir")

INFER_CHUNK = 32  # fixed so results do not depend on the thread count


# ---------------------------------------------------------------------------
# synthesis


def board_spec(cfg: RunConfig) -> synthboard.BoardSpec:
    return synthboard.BoardSpec(
        seed=cfg.seed, height=cfg.board_size, width=cfg.board_size,
        component_count=cfg.component_count, trace_count=cfg.trace_count, pad_count=cfg.pad_count,
    )


def synthesize(out_dir: str | Path, cfg: RunConfig) -> Path:
    """Write ``normal/``, ``test/`` (+ ``_gt.pgm``), ``good/`` and ``manifest.txt``."""
    out = Path(out_dir)
    for sub in ("normal", "test", "good"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    spec = board_spec(cfg)
    for i in range(cfg.n_normal):
        imaging.write_image(synthboard.generate_board(spec, i).image, out / "normal" / f"{i:03d}.ppm")
    rng = np.random.default_rng([cfg.seed, 0x7E57])
    manifest = []
    for j in range(cfg.n_test):
        board = synthboard.generate_board(spec, 100_000 + j)
        kinds = synthboard.sample_defect_kinds(cfg.defects_per_board, rng)
        board, notes = synthboard.inject_defects(board, kinds, seed=cfg.seed * 7919 + j)
        name = f"test/{j:03d}.ppm"
        imaging.write_image(board.image, out / name)
        gt = np.any(np.stack([n.mask for n in notes]), axis=0)
        imaging.write_image(gt.astype(np.float32), out / "test" / f"{j:03d}_gt.pgm")
        manifest += [f"{name} {n.kind} {' '.join(str(v) for v in n.bbox)}" for n in notes]
    for j in range(cfg.n_good):
        imaging.write_image(synthboard.generate_board(spec, 200_000 + j).image, out / "good" / f"{j:03d}.ppm")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    (out / "synth.cfg").write_text(emit_config(cfg))
    return out


@dataclass
class TestImage:
    path: Path
    image: np.ndarray
    defects: list[np.ndarray]  # one boolean mask per annotated defect
    kinds: list[str]


def load_test_split(data_dir: str | Path) -> tuple[list[TestImage], list[Path]]:
    """Defect images with per-defect masks (gt mask cut by manifest bbox), and defect-free paths."""
    data = Path(data_dir)
    entries: dict[str, list[tuple[str, tuple[int, int, int, int]]]] = {}
    for line in (data / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, kind, *box = line.split()
        entries.setdefault(name, []).append((kind, tuple(int(v) for v in box)))  # type: ignore[arg-type]
    tests = []
    for name in sorted(entries):
        path = data / name
        gt = imaging.read_image(path.with_name(path.stem + "_gt.pgm"))[..., 0] > 0.5
        masks, kinds = [], []
        for kind, (r, c, h, w) in entries[name]:
            m = np.zeros_like(gt)
            m[r : r + h, c : c + w] = gt[r : r + h, c : c + w]
            masks.append(m)
            kinds.append(kind)
        tests.append(TestImage(path, imaging.read_image(path), masks, kinds))
    good = sorted((data / "good").glob("*.ppm"))
    return tests, good


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epoch_loss: list[float]
    epoch_terms: list[dict[str, float]]


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(lam=cfg.lam, gamma=cfg.gamma, eps=cfg.dice_eps)


def train(images: list[np.ndarray], cfg: RunConfig, state: nnet.ModelState | None = None) -> tuple[nnet.ModelState, TrainLog]:
    """Optimise the composite objective on corrupted patches of normal images.

    Each epoch draws ``patches_per_image`` random patch origins per image.
    """
    if not images:
        raise ValueError("no training images")
    if state is None:
        state = nnet.init_state(3 + POS_CHANNELS, cfg.seed)
    h, w = images[0].shape[:2]
    grid = imaging.build_grid(h, w, cfg.patch_size)
    padded = [imaging.pad_to_grid(img, grid) for img in images]
    P = cfg.patch_size
    weights = loss_weights(cfg)
    hist = TrainLog([], [])
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 0xE90C, epoch])
        img_idx = np.repeat(np.arange(len(padded)), cfg.patches_per_image)
        rng.shuffle(img_idx)
        rows = rng.integers(0, grid.padded_height - P + 1, size=img_idx.size)
        cols = rng.integers(0, grid.padded_width - P + 1, size=img_idx.size)
        aug_seeds = rng.integers(0, 2**63 - 1, size=img_idx.size)
        total, count = 0.0, 0
        terms_acc = {"mse": 0.0, "ssim": 0.0, "dice": 0.0}
        for start in range(0, img_idx.size, cfg.batch):
            sl = slice(start, start + cfg.batch)
            pairs = [
                synthboard.augment_patch(padded[i][r : r + P, c : c + P], int(s))
                for i, r, c, s in zip(img_idx[sl], rows[sl], cols[sl], aug_seeds[sl])
            ]
            pos = np.stack([positional_at(int(r), int(c), P, grid.padded_height, grid.padded_width) for r, c in zip(rows[sl], cols[sl])])
            res = train_objective(
                state,
                np.stack([p.input for p in pairs]),
                np.stack([p.target for p in pairs]),
                np.stack([p.pseudo_mask for p in pairs]),
                pos,
                weights,
            )
            if not math.isfinite(res.loss):
                raise nnet.TrainingError(f"non-finite loss at epoch {epoch + 1}, step {state.step + 1}: terms {res.terms}")
            nnet.adam_step(state, res.grads, cfg.lr)
            n = len(pairs)
            total += res.loss * n
            count += n
            for k in terms_acc:
                terms_acc[k] += res.terms[k] * n
        hist.epoch_loss.append(total / count)
        hist.epoch_terms.append({k: v / count for k, v in terms_acc.items()})
        log.info("epoch %d/%d loss %.5f (mse %.5f ssim %.4f dice %.4f)", epoch + 1, cfg.epochs, total / count,
                 *(hist.epoch_terms[-1][k] for k in ("mse", "ssim", "dice")))
    return state, hist


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferResult:
    recon: np.ndarray  # merged reconstruction, cropped to the input size
    gate: np.ndarray  # stitched gate (diagnostic)
    amap: evalkit.AnomalyMap


def infer_image(img: np.ndarray, state: nnet.ModelState, cfg: RunConfig) -> InferResult:
    """Pad, tile at half stride, run every patch, merge, crop, difference."""
    grid = imaging.build_grid(img.shape[0], img.shape[1], cfg.patch_size)
    padded = imaging.pad_to_grid(img, grid)
    n = len(grid.origins)
    patches = np.stack([imaging.extract_patch(padded, grid, k) for k in range(n)])
    pos = np.stack([positional_channels(grid, k) for k in range(n)])
    chunks = [slice(s, s + INFER_CHUNK) for s in range(0, n, INFER_CHUNK)]

    def run(sl: slice):
        return infer_patches(state, patches[sl], pos[sl], cfg.gate)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(sl) for sl in chunks]
    blended = np.concatenate([o[0] for o in outs])
    gates = np.concatenate([o[1] for o in outs])
    if cfg.merge == "rops":
        merged = rops_merge(padded, blended, grid, MergeConfig(cfg.t_diff, cfg.cell_score))
    else:
        merged = average_merge(blended, grid)
    recon = imaging.crop_to(merged, grid)
    gate = imaging.crop_to(stitch_gates(gates, grid), grid)
    return InferResult(recon, gate, evalkit.anomaly_map(recon, img))


def write_outputs(res: InferResult, prefix: str | Path) -> list[Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    out = {
        "heatmap": (prefix.with_name(prefix.name + "_heatmap.pgm"), res.amap.normalized, 16),
        "color": (prefix.with_name(prefix.name + "_heatmap_color.ppm"), evalkit.false_color(res.amap.normalized), 8),
        "recon": (prefix.with_name(prefix.name + "_recon.ppm"), res.recon, 8),
        "gate": (prefix.with_name(prefix.name + "_gate.pgm"), res.gate, 16),
    }
    for path, arr, depth in out.values():
        imaging.write_image(arr, path, bit_depth=depth)
    raw = prefix.with_name(prefix.name + "_score.fmap")
    imaging.write_float_map(res.amap.raw.astype(np.float32), raw)
    return [p for p, _, _ in out.values()] + [raw]


# ---------------------------------------------------------------------------
# evaluation

THETA_SWEEP = tuple(round(t, 3) for t in np.arange(0.05, 1.0, 0.05))


@dataclass
class SuiteMaps:
    defect: list[evalkit.AnomalyMap]
    free: list[evalkit.AnomalyMap]
    gts: list[list[np.ndarray]]


def score_suite(data_dir: str | Path, state: nnet.ModelState, cfg: RunConfig) -> SuiteMaps:
    tests, good = load_test_split(data_dir)
    defect = [infer_image(t.image, state, cfg).amap for t in tests]
    free = [infer_image(imaging.read_image(p), state, cfg).amap for p in good]
    return SuiteMaps(defect, free, [t.defects for t in tests])


def evaluate_maps(maps: SuiteMaps, cfg: RunConfig, sweep: bool = False) -> evalkit.EvalReport:
    report = evalkit.evaluate_suite(maps.defect, maps.free, maps.gts, cfg.theta, cfg.min_area, cfg.fpr_cap)
    if sweep:
        report.sweep = evalkit.sweep_theta(maps.defect, maps.free, maps.gts, THETA_SWEEP, cfg.min_area)
    return report


def best_theta(rows: list[dict]) -> dict:
    """Sweep row with the highest F1 (ties: higher precision, then higher theta)."""
    return max(rows, key=lambda r: (r["f1"], r["precision"], r["theta"]))
