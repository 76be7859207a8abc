"""Image quality metrics: windowed SSIM, PSNR, MSE."""
from __future__ import annotations

import math

import numpy as np

from . import kernels

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` windows (stride 1, uniform
    weights), averaged over channels. Pixel range is [0, 1]."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    if H < window or W < window:
        raise ValueError(f"image {H}x{W} smaller than the {window}x{window} window")
    n = float(window * window)
    total = 0.0
    for c in range(C):
        x = np.ascontiguousarray(a[..., c])
        y = np.ascontiguousarray(b[..., c])
        mx = kernels.box_sum(x, window) / n
        my = kernels.box_sum(y, window) / n
        sxx = kernels.box_sum(x * x, window) / n - mx * mx
        syy = kernels.box_sum(y * y, window) / n - my * my
        sxy = kernels.box_sum(x * y, window) / n - mx * my
        num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        total += float((num / den).mean())
    return total / C


def mse(a, b) -> float:
    a, b = _check(a, b)
    d = a - b
    return float((d * d).mean())


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images; ``inf`` when identical."""
    m = mse(a, b)
    return math.inf if m == 0.0 else 10.0 * math.log10(1.0 / m)
