"""Full-reference image quality metrics."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give ``cap``."""
    a, b = _pair(a, b)
    # extended precision keeps e.g. a uniform 0.1 error at exactly 20 dB after rounding
    d = a.astype(np.longdouble) - b.astype(np.longdouble)
    mse = np.mean(d * d)
    if mse == 0.0:
        return cap
    return min(cap, float(-10.0 * np.log10(mse)))


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, w.shape)
    return np.einsum("ijkl,kl->ij", win, w)


def ssim_map(a, b) -> np.ndarray:
    ya, yb = _pair(to_luma(a), to_luma(b))
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a = _filter_valid(ya, w)
    mu_b = _filter_valid(yb, w)
    s_aa = _filter_valid(ya * ya, w) - mu_a * mu_a
    s_bb = _filter_valid(yb * yb, w) - mu_b * mu_b
    s_ab = _filter_valid(ya * yb, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM on luma with an 11x11 Gaussian (sigma 1.5), valid region only."""
    return float(np.mean(ssim_map(a, b)))
