"""Anomaly maps and localisation metrics.

Pixel-level: ROC AUC (exact, tie-aware) and AUPRO (per-region overlap
integrated over false-positive rate up to a cap).  Defect-level: one global
threshold binarises every normalised map, 8-connected components are matched
greedily to ground-truth defects by IoU, and a match counts only if the IoU
exceeds 0.5.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "UndefinedMetricError",
    "AnomalyMap",
    "DefectMatch",
    "MatchResult",
    "EvalReport",
    "anomaly_map",
    "minmax_normalize",
    "pixel_auroc",
    "aupro",
    "label_components",
    "binarize_components",
    "match_defects",
    "evaluate_suite",
    "sweep_theta",
    "false_color",
    "write_report",
]

EIGHT = np.ones((3, 3), dtype=bool)
IOU_MATCH = 0.5


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class AnomalyMap:
    raw: np.ndarray
    normalized: np.ndarray


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros_like(raw)


def anomaly_map(i_f: np.ndarray, i_ori: np.ndarray) -> AnomalyMap:
    """Channel-mean absolute difference, plus its per-image min-max normalisation."""
    if i_f.shape != i_ori.shape:
        raise ValueError(f"shape mismatch: {i_f.shape} vs {i_ori.shape}")
    d = np.abs(np.asarray(i_f, dtype=np.float64) - np.asarray(i_ori, dtype=np.float64))
    raw = d.mean(axis=-1) if d.ndim == 3 else d
    return AnomalyMap(raw, minmax_normalize(raw))


def _flatten(scores, gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, AnomalyMap):
        scores = scores.normalized
    if isinstance(scores, (list, tuple)):
        s = np.concatenate([np.ravel(x.normalized if isinstance(x, AnomalyMap) else x) for x in scores])
        g = np.concatenate([np.ravel(x) for x in gt])
    else:
        s, g = np.ravel(scores), np.ravel(gt)
    if s.shape != g.shape:
        raise ValueError("scores and ground truth differ in size")
    return np.asarray(s, dtype=np.float64), np.asarray(g).astype(bool)


def pixel_auroc(scores, gt) -> float:
    """Area under the ROC curve; tied scores form one trapezoid step.

    Accepts a single map/mask pair or lists of them (pixels pooled).
    """
    s, g = _flatten(scores, gt)
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative pixels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    g_sorted = g[order]
    # cumulative counts at the end of every block of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(g_sorted)[ends].astype(np.int64)
    fp = (ends + 1) - tp
    tp_prev = np.r_[0, tp[:-1]]
    fp_prev = np.r_[0, fp[:-1]]
    # twice the trapezoid area, in exact integer arithmetic
    twice_area = int(np.sum((fp - fp_prev) * (tp + tp_prev), dtype=np.int64))
    return float(Fraction(twice_area, 2 * n_pos * n_neg))


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labelling; 0 is background."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT)
    return labels, int(n)


def aupro(scores, gt, fpr_cap: float = 0.3) -> float:
    """Normalised area under the per-region-overlap curve for FPR in [0, fpr_cap].

    PRO at a threshold is the mean, over 8-connected ground-truth regions, of
    the fraction of each region scoring at or above it.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise ValueError("fpr_cap must lie in (0, 1]")
    if isinstance(scores, (list, tuple)):
        maps = [x.normalized if isinstance(x, AnomalyMap) else np.asarray(x) for x in scores]
        gts = [np.asarray(x, dtype=bool) for x in gt]
    else:
        maps = [scores.normalized if isinstance(scores, AnomalyMap) else np.asarray(scores)]
        gts = [np.asarray(gt, dtype=bool)]
    weights = []
    for g in gts:
        labels, n = label_components(g)
        w = np.zeros(g.shape, dtype=np.float64)
        if n:
            areas = np.bincount(labels.ravel())
            w[g] = 1.0 / areas[labels[g]]
        weights.append(w)
    n_regions = sum(label_components(g)[1] for g in gts)
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO needs at least one ground-truth region")
    s = np.concatenate([np.ravel(m) for m in maps]).astype(np.float64)
    pos = np.concatenate([np.ravel(g) for g in gts])
    w = np.concatenate([np.ravel(x) for x in weights])
    n_neg = int((~pos).sum())
    if n_neg == 0:
        raise UndefinedMetricError("AUPRO needs negative pixels")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    fpr = np.cumsum(~pos[order])[ends] / n_neg
    pro = np.cumsum(w[order])[ends] / n_regions
    fpr = np.r_[0.0, fpr]
    pro = np.r_[0.0, pro]
    return _area_to_cap(fpr, pro, fpr_cap) / fpr_cap


def _area_to_cap(x: np.ndarray, y: np.ndarray, cap: float) -> float:
    """Trapezoid area under the polyline (x, y) for x in [0, cap]; x non-decreasing."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= cap:
            break
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += (x1 - x0) * (y0 + y1) / 2
    return float(area)


def binarize_components(scores, theta: float, min_area: int = 4) -> list[np.ndarray]:
    """Boolean masks of the 8-connected regions with normalised score >= theta."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    norm = scores.normalized if isinstance(scores, AnomalyMap) else np.asarray(scores)
    labels, n = label_components(norm >= theta)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())
    return [labels == i for i in range(1, n + 1) if areas[i] >= min_area]


@dataclass(frozen=True)
class DefectMatch:
    pred: int
    gt: int
    iou: float


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: list[DefectMatch]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    if inter == 0:
        return 0.0
    return inter / np.count_nonzero(a | b)


def match_defects(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> MatchResult:
    """Greedy one-to-one assignment in descending IoU; a pair counts only if IoU > 0.5."""
    cands = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou = _iou(np.asarray(p, dtype=bool), np.asarray(g, dtype=bool))
            if iou > IOU_MATCH:
                cands.append((-iou, i, j))
    cands.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches = []
    for neg_iou, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append(DefectMatch(i, j, -neg_iou))
    tp = len(matches)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, matches)


@dataclass
class EvalReport:
    pixel_auroc: float
    aupro: float
    precision: float
    recall: float
    fp_count_defect_free: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    theta: float = 0.5
    precision_defined: bool = True
    sweep: list[dict] = field(default_factory=list)

    @property
    def f1(self) -> float:
        s = self.precision + self.recall
        return 2 * self.precision * self.recall / s if s else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("sweep")
        return d


def _defect_level(defect_maps, free_maps, gts, theta: float, min_area: int) -> dict:
    tp = fp = fn = 0
    for m, g in zip(defect_maps, gts):
        res = match_defects(binarize_components(m, theta, min_area), g)
        tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
    fp_free = sum(len(binarize_components(m, theta, min_area)) for m in free_maps)
    fp_total = fp + fp_free
    defined = tp + fp_total > 0
    precision = tp / (tp + fp_total) if defined else 0.0
    n_gt = tp + fn
    recall = tp / n_gt if n_gt else 0.0
    return dict(theta=theta, tp=tp, fp=fp_total, fn=fn, fp_count_defect_free=fp_free,
                precision=precision, recall=recall, precision_defined=defined)


def sweep_theta(defect_maps, free_maps, gts, thetas: Sequence[float], min_area: int = 4) -> list[dict]:
    rows = []
    for t in thetas:
        row = _defect_level(defect_maps, free_maps, gts, float(t), min_area)
        s = row["precision"] + row["recall"]
        row["f1"] = 2 * row["precision"] * row["recall"] / s if s else 0.0
        rows.append(row)
    return rows


def evaluate_suite(
    defect_maps: Sequence,
    free_maps: Sequence,
    gts: Sequence[Sequence[np.ndarray]],
    theta: float = 0.5,
    min_area: int = 4,
    fpr_cap: float = 0.3,
) -> EvalReport:
    """Pixel metrics pooled over defect images; defect-level metrics at one global theta.

    ``gts[i]`` lists one boolean mask per ground-truth defect of image ``i``.
    """
    if len(defect_maps) != len(gts):
        raise ValueError("one list of ground-truth masks per defect image is required")
    pixel_gt = [np.any(np.stack(g), axis=0) if len(g) else np.zeros(np.shape(_norm(m)), bool) for m, g in zip(defect_maps, gts)]
    norm = [_norm(m) for m in defect_maps]
    row = _defect_level(defect_maps, free_maps, gts, theta, min_area)
    return EvalReport(
        pixel_auroc=pixel_auroc(norm, pixel_gt),
        aupro=aupro(norm, pixel_gt, fpr_cap),
        precision=row["precision"],
        recall=row["recall"],
        fp_count_defect_free=row["fp_count_defect_free"],
        tp=row["tp"],
        fp=row["fp"],
        fn=row["fn"],
        theta=theta,
        precision_defined=row["precision_defined"],
    )


def _norm(m) -> np.ndarray:
    return m.normalized if isinstance(m, AnomalyMap) else np.asarray(m)


def false_color(norm: np.ndarray) -> np.ndarray:
    """Blue-cyan-yellow-red ramp for a [0, 1] map, as an (H, W, 3) image."""
    x = np.clip(np.asarray(norm, dtype=np.float64), 0.0, 1.0)[..., None]
    stops = np.array([0.0, 0.35, 0.65, 1.0])
    colors = np.array([[0.0, 0.0, 0.5], [0.0, 0.8, 0.9], [1.0, 0.9, 0.0], [0.9, 0.0, 0.0]])
    return np.stack([np.interp(x[..., 0], stops, colors[:, k]) for k in range(3)], axis=-1)


def write_report(report: EvalReport, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.txt`` (human readable) and ``<stem>.kv`` (key=value)."""
    stem = Path(stem)
    txt = stem.with_suffix(".txt")
    kv = stem.with_suffix(".kv")
    lines = [
        f"pixel AUROC            {report.pixel_auroc:.4f}",
        f"AUPRO                  {report.aupro:.4f}",
        f"theta                  {report.theta:.3f}",
        f"defect precision       {100 * report.precision:.2f}%" + ("" if report.precision_defined else "  (undefined: no predictions)"),
        f"defect recall          {100 * report.recall:.2f}%",
        f"TP / FP / FN           {report.tp} / {report.fp} / {report.fn}",
        f"FPs on defect-free set {report.fp_count_defect_free}",
    ]
    if report.sweep:
        lines += ["", "theta  precision  recall  fp_defect_free  f1"]
        lines += [
            f"{r['theta']:.3f}  {100 * r['precision']:8.2f}  {100 * r['recall']:6.2f}  {r['fp_count_defect_free']:14d}  {r['f1']:.4f}"
            for r in report.sweep
        ]
    txt.write_text("\n".join(lines) + "\n")
    kv.write_text("".join(f"{k}={v}\n" for k, v in report.as_dict().items()))
    return txt, kv
