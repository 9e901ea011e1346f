"""Image-quality metrics."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the last two axes, 'valid' extent."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(rows, k, axis=-2) @ g


def _as_nchw(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ValueError(f"expected a 2-D, 3-D or 4-D image, got shape {x.shape}")


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM, shape (N, C, H - window + 1, W - window + 1)."""
    x, y = _as_nchw(a), _as_nchw(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape[2:]) < window:
        raise ValueError(f"image {x.shape[2:]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0, mask: Optional[np.ndarray] = None) -> float:
    """Mean Gaussian-windowed SSIM over channels and window positions.

    With ``mask`` (H, W or N, H, W), only windows centred on masked pixels
    are averaged.
    """
    m = ssim_map(a, b, window, sigma, k1, k2, data_range)
    if mask is None:
        return float(m.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    r = window // 2
    centres = mask[:, r : mask.shape[1] - r, r : mask.shape[2] - r]
    sel = np.broadcast_to(centres[:, None], m.shape)
    if not sel.any():
        raise ValueError("mask selects no complete window")
    return float(m[sel].mean())


def l1(a, b, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute difference, optionally restricted to masked pixels."""
    a, b = _as_nchw(a), _as_nchw(b)
    d = np.abs(a - b).mean(axis=1)
    if mask is None:
        return float(d.mean())
    mask = np.asarray(mask, bool)
    if mask.ndim == 2:
        mask = mask[None]
    if not mask.any():
        return 0.0
    return float(d[np.broadcast_to(mask, d.shape)].mean())
