"""Reconstruction quality metrics: PSNR and per-band SSIM."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

PSNR_CAP_DB = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(x, ref, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all entries; zero MSE reports the 99 dB cap."""
    a, b = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", view, win)


def _ssim_band(x: np.ndarray, y: np.ndarray, dynamic_range: float) -> float:
    h, w = x.shape
    if min(h, w) < _SSIM_WINDOW:
        # Band smaller than the standard window: fall back to one uniform
        # window covering the whole band (global statistics).
        win = np.full((h, w), 1.0 / (h * w))
    else:
        win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    var_x = _filter_valid(x * x, win) - mu_x * mu_x
    var_y = _filter_valid(y * y, win) - mu_y * mu_y
    cov = _filter_valid(x * y, win) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(x, ref, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity, computed per band and averaged.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03. 2-d inputs are
    treated as a single band.
    """
    a, b = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim: expected (C, H, W) or (H, W), got ndim {a.ndim}")
    return float(np.mean([_ssim_band(a[i], b[i], dynamic_range) for i in range(a.shape[0])]))
