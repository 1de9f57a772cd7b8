"""Region-level selection merge of overlapping patch reconstructions.

Each stride x stride cell is covered by one to four patches.  A cell whose
worst covering reconstruction stays within ``t_diff`` of the input is the
average of its covers; otherwise it is copied whole from the cover that
disagrees with the input the most (lowest patch index on ties).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imaging import CellRef, PatchGrid

__all__ = ["MergeConfig", "cell_diff", "rops_merge", "average_merge", "stitch_gates"]


@dataclass(frozen=True)
class MergeConfig:
    t_diff: float = 0.1
    cell_score: str = "max_pixel"  # or "mean_pixel"

    def __post_init__(self) -> None:
        if not 0.0 < self.t_diff < 1.0:
            raise ValueError(f"t_diff must lie in (0, 1), got {self.t_diff}")
        if self.cell_score not in ("max_pixel", "mean_pixel"):
            raise ValueError(f"unknown cell_score {self.cell_score!r}")


def _reduce(absdiff: np.ndarray, how: str) -> float:
    per_pixel = absdiff.mean(axis=-1) if absdiff.ndim == 3 else absdiff
    return float(per_pixel.max() if how == "max_pixel" else per_pixel.mean())


def cell_diff(inp: np.ndarray, recon_patch: np.ndarray, grid: PatchGrid, k: int, cell: CellRef, cfg: MergeConfig) -> float:
    """Disagreement between patch ``k`` and the (padded) input over one cell.

    Absolute difference averaged over channels, then reduced over the cell by
    ``cfg.cell_score``.
    """
    rs, cs = grid.cell_slice(cell)
    prs, pcs = grid.cell_slice_in_patch(cell, k)  # raises if the cell is outside patch k
    a = np.asarray(inp[rs, cs], dtype=np.float64)
    b = np.asarray(recon_patch[prs, pcs], dtype=np.float64)
    return _reduce(np.abs(a - b), cfg.cell_score)


def _check(inp: np.ndarray, patches: Sequence[np.ndarray], grid: PatchGrid) -> None:
    if len(patches) != len(grid.origins):
        raise ValueError(f"got {len(patches)} patches for a grid of {len(grid.origins)}")
    if inp.shape[:2] != (grid.padded_height, grid.padded_width):
        raise ValueError("input must be padded to the grid dimensions")


def rops_merge(inp: np.ndarray, patches: Sequence[np.ndarray], grid: PatchGrid, cfg: MergeConfig = MergeConfig()) -> np.ndarray:
    """Merge blended patches into a padded full-size image.  The caller crops."""
    _check(inp, patches, grid)
    s = grid.stride
    nr, nc = grid.n_cell_rows, grid.n_cell_cols
    stack = np.asarray(patches)
    ch = stack.shape[-1]
    # view the input and every patch as cells: (..., cell_row, s, cell_col, s, C)
    inp_cells = np.asarray(inp, dtype=stack.dtype).reshape(nr, s, nc, s, ch)
    quarter = stack.reshape(len(patches), 2, s, 2, s, ch)
    out = np.empty((nr, s, nc, s, ch), dtype=stack.dtype)
    for cell in grid.cells:
        i, j = cell.cell_row, cell.cell_col
        target = inp_cells[i, :, j].astype(np.float64)
        covers = []
        scores = []
        for k in cell.covering_patches:
            pr, pc = grid.origins[k]
            qi, qj = i - pr // s, j - pc // s
            block = quarter[k, qi, :, qj]
            covers.append(block)
            scores.append(_reduce(np.abs(block.astype(np.float64) - target), cfg.cell_score))
        best = int(np.argmax(scores))  # first maximum == lowest patch index
        if scores[best] < cfg.t_diff:
            out[i, :, j] = np.mean(np.stack(covers), axis=0, dtype=np.float64).astype(stack.dtype)
        else:
            out[i, :, j] = covers[best]
    return out.reshape(grid.padded_height, grid.padded_width, ch)


def average_merge(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Plain per-pixel average of all covering patches (the no-selection baseline)."""
    stack = np.asarray(patches)
    acc = np.zeros((grid.padded_height, grid.padded_width) + stack.shape[3:], dtype=np.float64)
    count = np.zeros((grid.padded_height, grid.padded_width), dtype=np.float64)
    p = grid.patch_size
    for k, (r, c) in enumerate(grid.origins):
        acc[r : r + p, c : c + p] += stack[k]
        count[r : r + p, c : c + p] += 1
    if acc.ndim == 3:
        count = count[..., None]
    return (acc / count).astype(stack.dtype)


def stitch_gates(gates: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Full-size gate map (diagnostic): per-pixel mean of the covering gates."""
    return average_merge(gates, grid)
