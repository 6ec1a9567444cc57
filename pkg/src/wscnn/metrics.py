"""Image-quality metrics: masked PSNR, windowed SSIM and region SNR.

Identical inputs give ``math.inf`` for PSNR and SNR rather than raising.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError


def _pair(test, reference, mask):
    a = np.asarray(test, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image extents differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, bool) if mask is None else np.asarray(mask, bool)
    if m.shape != a.shape:
        raise DataError(f"mask extents {m.shape} do not match images {a.shape}")
    if not m.any():
        raise DataError("mask selects no pixels")
    return a, b, m


def _peak(reference: np.ndarray, mask: np.ndarray, peak: float | None) -> float:
    p = float(np.max(reference[mask])) if peak is None else float(peak)
    if not p > 0:
        raise DataError(f"peak must be positive, got {p}")
    return p


def psnr(test, reference, peak: float | None = None, mask=None) -> float:
    """10 log10(peak^2 / MSE) over ``mask``; peak defaults to the reference's mask maximum."""
    a, b, m = _pair(test, reference, mask)
    p = _peak(b, m, peak)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(p * p / mse)


def ssim(test, reference, peak: float | None = None, mask=None, window: int = 8) -> float:
    """Mean SSIM over every ``window`` x ``window`` stride-1 window lying fully inside ``mask``.

    Local statistics use uniform weights and population (1/n) moments.
    """
    a, b, m = _pair(test, reference, mask)
    p = _peak(b, m, peak)
    if a.shape[0] < window or a.shape[1] < window:
        raise DataError(f"images {a.shape} smaller than the {window}x{window} SSIM window")
    inside = sliding_window_view(m, (window, window)).all(axis=(-2, -1))
    if not inside.any():
        raise DataError(f"mask contains no complete {window}x{window} window")
    wa = sliding_window_view(a, (window, window))[inside]
    wb = sliding_window_view(b, (window, window))[inside]
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[:, None, None]
    db = wb - mu_b[:, None, None]
    var_a = np.mean(da * da, axis=(-2, -1))
    var_b = np.mean(db * db, axis=(-2, -1))
    cov = np.mean(da * db, axis=(-2, -1))
    c1 = (0.01 * p) ** 2
    c2 = (0.03 * p) ** 2
    num = (mu_a * mu_b + mu_a * mu_b + c1) * (cov + cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def snr(img, signal_mask, noise_mask) -> float:
    """20 log10(mean over ``signal_mask`` / population std over ``noise_mask``)."""
    x = np.asarray(img, dtype=np.float64)
    s = np.asarray(signal_mask, bool)
    n = np.asarray(noise_mask, bool)
    if s.shape != x.shape or n.shape != x.shape:
        raise DataError("signal and noise masks must match the image extents")
    if not s.any() or not n.any():
        raise DataError("signal and noise masks must each select at least one pixel")
    sd = float(np.std(x[n]))
    if sd == 0:
        return math.inf
    mean = float(np.mean(x[s]))
    if mean <= 0:
        raise DataError(f"signal mean must be positive for a dB ratio, got {mean}")
    return 20.0 * math.log10(mean / sd)


def mean_psnr(tests, references, peak: float | None = None, mask=None) -> float:
    """Mean of per-image PSNRs (pairs with zero error excluded); inf if all are exact."""
    vals = [psnr(t, r, peak, mask) for t, r in zip(tests, references)]
    finite = [v for v in vals if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf
