"""Reconstruction quality metrics.

SSIM is deliberately pinned to one definition, since implementations
disagree: an 11x11 Gaussian window with sigma 1.5 normalized to unit
sum, K1 = 0.01, K2 = 0.03, dynamic range 1.0, uncentered weighted
window moments, and the mean taken over valid window positions only
(no padding). Cross-checks against 8-bit references must rescale to
[0, 1] first.
"""

from __future__ import annotations

import math

import numpy as np

from eqsense.autodiff import ShapeError

__all__ = ["PSNR_SENTINEL", "psnr", "ssim", "hmse", "gaussian_window"]

PSNR_SENTINEL = 99.0


def hmse(a: np.ndarray, b: np.ndarray) -> float:
    """Half mean square error: sum of squared differences over 2N."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hmse: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d) / (2.0 * a.size))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report 99.0."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"psnr: {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * (np.arange(size) - half) ** 2 / sigma ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    wins = np.lib.stride_tricks.sliding_window_view(img, w.shape)
    return np.tensordot(wins, w, axes=([2, 3], [0, 1]))


def ssim(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean local structural similarity over valid 11x11 windows."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"ssim: {x.shape} vs {ref.shape}")
    if x.ndim != 2 or min(x.shape) < 11:
        raise ValueError(f"ssim needs a 2-D image at least 11x11, got {x.shape}")
    w = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = _window_means(x, w)
    mu_y = _window_means(ref, w)
    e_xx = _window_means(x * x, w)
    e_yy = _window_means(ref * ref, w)
    e_xy = _window_means(x * ref, w)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))
