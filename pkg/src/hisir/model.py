"""Gated reconstruction model: positional input channels, shared encoder, two heads.

The reconstruction head proposes a clean patch, the mask head proposes a
per-pixel gate, and the output keeps the input wherever the gate is closed::

    blended = gate * recon + (1 - gate) * input
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnet
from .imaging import PatchGrid
from .losses import LossWeights, total_loss
from .synthboard import AugmentedPair

__all__ = [
    "POS_CHANNELS",
    "positional_channels",
    "positional_at",
    "sir_gate_blend",
    "TrainResult",
    "train_objective",
    "forward_train",
    "forward_infer",
    "infer_patches",
]

POS_CHANNELS = 4


def positional_at(row0: int, col0: int, size: int, padded_height: int, padded_width: int, dtype=np.float32) -> np.ndarray:
    """(size, size, 4) sin/cos of the global row and column phase of each pixel."""
    r = 2 * np.pi * (row0 + np.arange(size)) / padded_height
    c = 2 * np.pi * (col0 + np.arange(size)) / padded_width
    out = np.empty((size, size, 4), dtype=np.float64)
    out[..., 0] = np.sin(r)[:, None]
    out[..., 1] = np.cos(r)[:, None]
    out[..., 2] = np.sin(c)[None, :]
    out[..., 3] = np.cos(c)[None, :]
    return out.astype(dtype)


def positional_channels(grid: PatchGrid, k: int) -> np.ndarray:
    r0, c0 = grid.origins[k]
    return positional_at(r0, c0, grid.patch_size, grid.padded_height, grid.padded_width)


def sir_gate_blend(recon: np.ndarray, inp: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Per-pixel convex blend; a 2-D (or trailing-1) gate is broadcast over colour channels."""
    if m.ndim == recon.ndim - 1:
        m = m[..., None]
    if recon.shape != inp.shape or m.shape[:-1] != recon.shape[:-1] or m.shape[-1] != 1:
        raise ValueError(f"blend shape mismatch: recon {recon.shape}, input {inp.shape}, gate {m.shape}")
    return m * recon + (1 - m) * inp


@dataclass
class TrainResult:
    loss: float
    grads: dict[str, np.ndarray]
    terms: dict[str, float]
    blended: np.ndarray
    gate: np.ndarray


def train_objective(
    state: nnet.ModelState,
    inputs: np.ndarray,
    targets: np.ndarray,
    pseudo_masks: np.ndarray,
    pos: np.ndarray,
    w: LossWeights,
    detach_gate: bool = False,
) -> TrainResult:
    """Composite loss and gradients for a batch.

    ``inputs``/``targets`` are (N, P, P, 3), ``pseudo_masks`` (N, P, P), ``pos``
    (N, P, P, 4).  With ``detach_gate`` no gradient reaches the mask head.
    """
    dtype = state.params["enc1.w"].dtype
    inputs = np.asarray(inputs, dtype=dtype)
    x = np.concatenate([inputs, np.asarray(pos, dtype=dtype)], axis=-1)
    recon, gate, cache = nnet.forward(state, x)
    blended = gate * recon + (1 - gate) * inputs
    value, d_blend, d_gate_dice, terms = total_loss(
        blended, np.asarray(targets, dtype=dtype), gate[..., 0], np.asarray(pseudo_masks, dtype=dtype), w, batched=True
    )
    d_recon = d_blend * gate
    if detach_gate:
        d_gate = np.zeros_like(gate)
    else:
        # the blend routes reconstruction error into the gate as well
        d_gate = np.sum(d_blend * (recon - inputs), axis=-1, keepdims=True) + d_gate_dice[..., None]
    grads = nnet.backward(state, cache, d_recon, d_gate)
    return TrainResult(value, grads, terms, blended, gate[..., 0])


def forward_train(
    pair: AugmentedPair, grid: PatchGrid, k: int, state: nnet.ModelState, w: LossWeights
) -> tuple[float, dict[str, np.ndarray]]:
    if pair.input.shape[:2] != (grid.patch_size, grid.patch_size):
        raise ValueError("augmented pair does not match the grid patch size")
    pos = positional_channels(grid, k)
    res = train_objective(state, pair.input[None], pair.target[None], pair.pseudo_mask[None], pos[None], w)
    return res.loss, res.grads


def infer_patches(
    state: nnet.ModelState, patches: np.ndarray, pos: np.ndarray, gate_mode: str = "learned"
) -> tuple[np.ndarray, np.ndarray]:
    """Blended patches and gates for a batch.

    ``gate_mode``: ``learned`` (normal), ``open`` (gate forced to 1, raw
    reconstruction) or ``closed`` (gate forced to 0, identity).
    """
    dtype = state.params["enc1.w"].dtype
    patches = np.asarray(patches, dtype=dtype)
    x = np.concatenate([patches, np.asarray(pos, dtype=dtype)], axis=-1)
    recon, gate, _ = nnet.forward(state, x, keep_cache=False)
    if gate_mode == "open":
        gate = np.ones_like(gate)
    elif gate_mode == "closed":
        gate = np.zeros_like(gate)
    elif gate_mode != "learned":
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    return sir_gate_blend(recon, patches, gate), gate[..., 0]


def forward_infer(
    patch: np.ndarray, grid: PatchGrid, k: int, state: nnet.ModelState, gate_mode: str = "learned"
) -> tuple[np.ndarray, np.ndarray]:
    if patch.shape[:2] != (grid.patch_size, grid.patch_size):
        raise ValueError(f"patch {patch.shape[:2]} does not match grid patch size {grid.patch_size}")
    blended, gate = infer_patches(state, patch[None], positional_channels(grid, k)[None], gate_mode)
    return blended[0], gate[0]


@dataclass
class Batch:
    inputs: np.ndarray  # (N, P, P, 3)
    targets: np.ndarray  # (N, P, P, 3)
    masks: np.ndarray  # (N, P, P)
    pos: np.ndarray  # (N, P, P, 4)

    def __len__(self) -> int:
        return self.inputs.shape[0]
