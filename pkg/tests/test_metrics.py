import math

import numpy as np
import pytest

from wscnn import metrics
from wscnn import phantom as ph
from wscnn.errors import DataError


def test_psnr_identical_is_inf(rng):
    a = rng.random((16, 16))
    assert metrics.psnr(a, a) == math.inf


def test_psnr_constant_offset():
    a = np.full((10, 10), 2.0)
    b = a + 0.25
    np.testing.assert_allclose(metrics.psnr(b, a, peak=4.0), 20 * math.log10(4.0 / 0.25), rtol=1e-15)


def test_psnr_oracle(rng):
    a, b = rng.random((2, 20, 30))
    mask = rng.random((20, 30)) > 0.3
    mse = sum((a[i, j] - b[i, j]) ** 2 for i in range(20) for j in range(30) if mask[i, j]) / mask.sum()
    expected = 10 * math.log10(max(b[i, j] for i in range(20) for j in range(30) if mask[i, j]) ** 2 / mse)
    assert abs(metrics.psnr(a, b, mask=mask) - expected) < 1e-9


def test_psnr_symmetric_with_shared_peak(rng):
    a, b = rng.random((2, 12, 12))
    assert metrics.psnr(a, b, peak=1.0) == metrics.psnr(b, a, peak=1.0)


def test_psnr_rejects_bad_peak_and_shapes(rng):
    with pytest.raises(DataError):
        metrics.psnr(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(DataError, match="extents"):
        metrics.psnr(np.zeros((4, 4)), np.zeros((4, 5)), peak=1.0)


def test_ssim_identity_exact(rng):
    for scale in (1e-3, 1.0, 250.0):
        a = rng.random((24, 24)) * scale
        assert metrics.ssim(a, a) == 1.0


def test_ssim_inverted_phantom():
    img = ph.make_phantom().dwis[0]
    peak = float(img.max())
    assert metrics.ssim(peak - img, img, peak=peak) < 0.5


def test_ssim_constant_luminance_only():
    c, d, peak = 0.6, 0.1, 1.0
    a = np.full((16, 16), c)
    b = np.full((16, 16), c + d)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    expected = (2 * c * (c + d) + c1) / (c ** 2 + (c + d) ** 2 + c1) * (c2 / c2)
    np.testing.assert_allclose(metrics.ssim(b, a, peak=peak), expected, rtol=1e-12)


def test_ssim_symmetric(rng):
    a, b = rng.random((2, 20, 20))
    np.testing.assert_allclose(metrics.ssim(a, b, peak=1.0), metrics.ssim(b, a, peak=1.0), rtol=1e-14)


def test_ssim_range(rng):
    a, b = rng.random((2, 20, 20))
    assert -1.0 <= metrics.ssim(a, b, peak=1.0) <= 1.0


def test_mask_respecting(rng):
    a, b = rng.random((2, 30, 30))
    mask = np.zeros((30, 30), bool)
    mask[5:25, 4:26] = True
    pa, pb = a.copy(), b.copy()
    pa[~mask] = 1e6
    pb[~mask] = -1e6
    assert metrics.psnr(a, b, 1.0, mask) == metrics.psnr(pa, pb, 1.0, mask)
    assert metrics.ssim(a, b, 1.0, mask) == metrics.ssim(pa, pb, 1.0, mask)
    sig, noise = mask.copy(), ~mask
    assert metrics.snr(a, sig, noise) != metrics.snr(pa, sig, noise)
    assert metrics.snr(a, sig, noise) == metrics.snr(np.where(sig | noise, a, 7.0), sig, noise)


def test_ssim_needs_full_window():
    mask = np.zeros((20, 20), bool)
    mask[:7, :] = True
    with pytest.raises(DataError, match="window"):
        metrics.ssim(np.ones((20, 20)), np.ones((20, 20)), 1.0, mask)


def test_snr_closed_form():
    img = np.zeros((10, 10))
    sig = np.zeros((10, 10), bool)
    sig[:5] = True
    img[:5] = 10.0
    img[5:] = np.tile([-1.0, 1.0], 25).reshape(5, 10)
    np.testing.assert_allclose(metrics.snr(img, sig, ~sig), 20.0, rtol=1e-14)


def test_snr_zero_noise_is_inf():
    img = np.ones((4, 4))
    sig = np.zeros((4, 4), bool)
    sig[0] = True
    assert metrics.snr(img, sig, ~sig) == math.inf


def test_snr_oracle(rng):
    img = rng.random((12, 12)) + 1
    sig = rng.random((12, 12)) > 0.5
    noise = ~sig
    vals = img[noise]
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    expected = 20 * math.log10(img[sig].mean() / sd)
    np.testing.assert_allclose(metrics.snr(img, sig, noise), expected, rtol=1e-12)
