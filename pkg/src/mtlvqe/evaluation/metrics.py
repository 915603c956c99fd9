"""Luma PSNR / SSIM and anchor-relative deltas."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from ..data.color import luma

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

INF = math.inf


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")


def psnr_luma(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between the BT.709 luma of two 8-bit images; math.inf when identical."""
    _check(a, b)
    mse = float(np.mean((luma(a) - luma(b)) ** 2))
    if mse == 0.0:
        return INF
    return 10.0 * math.log10(PEAK * PEAK / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window ('valid' region)."""
    g = gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return out[half:img.shape[0] - half, half:img.shape[1] - half]

    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim_luma(a: np.ndarray, b: np.ndarray) -> float:
    _check(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if np.array_equal(a, b):
        return 1.0
    return float(ssim_map(luma(a), luma(b)).mean())


def delta_metrics(processed: np.ndarray, anchor: np.ndarray, original: np.ndarray) -> tuple[float, float]:
    """(metric(processed, original) - metric(anchor, original)) for PSNR and SSIM."""
    _check(processed, original)
    _check(anchor, original)
    p_proc, p_anchor = psnr_luma(processed, original), psnr_luma(anchor, original)
    if p_proc == p_anchor:
        d_psnr = 0.0
    else:
        d_psnr = p_proc - p_anchor
    d_ssim = ssim_luma(processed, original) - ssim_luma(anchor, original)
    return d_psnr, d_ssim
