"""Image quality metrics on unit-range images: PSNR and single-scale SSIM.

PSNR is 10*log10(1 / MSE) in dB with a documented cap of 99.0 for
identical (or numerically indistinguishable) inputs. SSIM follows the
standard single-scale recipe: 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, dynamic range 1.0, averaged over valid window
positions and then over channels.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .validation import check_image, check_same_shape

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(image_a, image_b):
    """Peak signal-to-noise ratio in dB (unit dynamic range)."""
    a = check_image(image_a, "first image")
    b = check_image(image_b, "second image")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=8)
def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_mean(plane, window):
    """Valid-mode local weighted means via sliding windows."""
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(plane, (k, k))
    return np.einsum("ijkl,kl->ij", view, window)


def ssim(image_a, image_b):
    """Mean structural similarity over valid 11x11 windows, channel-averaged."""
    a = check_image(image_a, "first image")
    b = check_image(image_b, "second image")
    check_same_shape(a, b)
    h, w, channels = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(
            f"image must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {h}x{w}"
        )
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    scores = []
    for c in range(channels):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = _windowed_mean(x, window)
        mu_y = _windowed_mean(y, window)
        xx = _windowed_mean(x * x, window) - mu_x * mu_x
        yy = _windowed_mean(y * y, window) - mu_y * mu_y
        xy = _windowed_mean(x * y, window) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
