"""Reconstruction and gate losses with analytic gradients.

Images are ``(..., H, W, C)``; every function returns ``(value, grad)`` where
``grad`` has the shape of the first argument.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = ["LossWeights", "mse", "ssim_index", "ssim_loss", "dice_loss", "total_loss"]

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1  # SSIM weight
    gamma: float = 0.1  # Dice weight
    eps: float = 1.0  # Dice smoothing

    def __post_init__(self) -> None:
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps <= 0:
            raise ValueError("dice epsilon must be positive")


RESNET_WEIGHTS = LossWeights(lam=0.1, gamma=0.001)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    _check_shapes(a, b)
    d = a - b
    return float(np.mean(d * d)), (2.0 / d.size) * d


@lru_cache(maxsize=32)
def _window_matrix(n: int, dtype: str) -> np.ndarray:
    """Rows of the valid-mode Gaussian filter as an (n - 10) x n matrix."""
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    g /= g.sum()
    m = np.zeros((n - SSIM_WIN + 1, n))
    for i in range(m.shape[0]):
        m[i, i : i + SSIM_WIN] = g
    return m.astype(dtype)


class _Filter:
    """Separable valid Gaussian filter over the H, W axes of (..., C, H, W) arrays."""

    def __init__(self, h: int, w: int, dtype):
        self.gh = _window_matrix(h, np.dtype(dtype).str)
        self.gw = _window_matrix(w, np.dtype(dtype).str)

    @staticmethod
    def _apply(x: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        # two flat GEMMs instead of many small batched ones
        lead, (h, w) = x.shape[:-2], x.shape[-2:]
        t = (x.reshape(-1, w) @ right).reshape(*lead, h, -1)
        t = np.swapaxes(t, -1, -2)
        t = (t.reshape(-1, h) @ left).reshape(*lead, right.shape[1], -1)
        return np.swapaxes(t, -1, -2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self._apply(x, self.gh.T, self.gw.T)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._apply(y, self.gh, self.gw)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    _check_shapes(a, b)
    h, w = a.shape[-3], a.shape[-2]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    x = np.moveaxis(a, -1, -3)
    y = np.moveaxis(b, -1, -3)
    f = _Filter(h, w, a.dtype)
    mx, my, fxx, fyy, fxy = f(np.stack([x, y, x * x, y * y, x * y]))
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (fxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (fxx - mx * mx) + (fyy - my * my) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (f, x, y, mx, my, a1, a2, b1, b2)


def ssim_index(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all channels and valid window positions."""
    s, _ = _ssim_terms(a, b)
    return float(s.mean())


def ssim_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, range 1)."""
    s, (f, x, y, mx, my, a1, a2, b1, b2) = _ssim_terms(a, b)
    den = b1 * b2
    # partials of s w.r.t. the filtered quantities mu_x, F(x^2), F(xy), holding b fixed
    d_fxx = -s / b2
    d_fxy = 2 * a1 / den
    d_mx = 2 * my * a2 / den - 2 * my * a1 / den - 2 * mx * s / b1 + 2 * mx * s / b2
    scale = -1.0 / s.size
    a_mx, a_fxx, a_fxy = f.adjoint(np.stack([d_mx, d_fxx, d_fxy]))
    gx = a_mx + 2 * x * a_fxx + y * a_fxy
    return 1.0 - float(s.mean()), np.moveaxis(scale * gx, -3, -1)


def dice_loss(m: np.ndarray, m_gt: np.ndarray, eps: float = 1.0, batched: bool = False) -> tuple[float, np.ndarray]:
    """Soft Dice loss; with ``batched`` the first axis indexes samples and losses are averaged."""
    _check_shapes(m, m_gt)
    if not batched:
        val, grad = dice_loss(m[None], m_gt[None], eps, batched=True)
        return val, grad[0]
    axes = tuple(range(1, m.ndim))
    shape = (-1,) + (1,) * (m.ndim - 1)
    inter = np.sum(m * m_gt, axis=axes)
    den = np.sum(m, axis=axes) + np.sum(m_gt, axis=axes) + eps
    num = 2 * inter + eps
    per = 1.0 - num / den
    grad = -(2 * m_gt * den.reshape(shape) - num.reshape(shape)) / (den * den).reshape(shape)
    n = m.shape[0]
    return float(per.mean()), grad / n


def total_loss(
    blended: np.ndarray,
    target: np.ndarray,
    m: np.ndarray,
    m_gt: np.ndarray,
    w: LossWeights,
    batched: bool = False,
) -> tuple[float, np.ndarray, np.ndarray, dict[str, float]]:
    """MSE + lam * SSIM on (blended, target) plus gamma * Dice on the gate.

    Returns ``(value, d_blended, d_gate, terms)``.
    """
    l_mse, g_blend = mse(blended, target)
    terms = {"mse": l_mse, "ssim": 0.0, "dice": 0.0}
    if w.lam:
        l_ssim, g_ssim = ssim_loss(blended, target)
        terms["ssim"] = l_ssim
        g_blend = g_blend + w.lam * g_ssim
    l_dice, g_gate = dice_loss(m, m_gt, w.eps, batched=batched)
    terms["dice"] = l_dice
    g_gate = w.gamma * g_gate
    value = l_mse + w.lam * terms["ssim"] + w.gamma * l_dice
    return value, g_blend, g_gate, terms
