"""Image-quality metrics for images in [0, 1]: PSNR and Gaussian-windowed
SSIM (11x11 window, sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0,
per channel then averaged)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; +inf for identical
    inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean(np.square(a - b)))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D image with win x win."""
    tmp = sliding_window_view(img, win.size, axis=1) @ win
    return np.ascontiguousarray((sliding_window_view(tmp, win.size, axis=0) @ win))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local structural similarity over all full 11x11 windows.

    Accepts (H, W) or (C, H, W); multichannel images are scored per
    channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")

    win = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _filter_valid(x, win)
        mu_y = _filter_valid(y, win)
        var_x = _filter_valid(x * x, win) - mu_x * mu_x
        var_y = _filter_valid(y * y, win) - mu_y * mu_y
        cov = _filter_valid(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
