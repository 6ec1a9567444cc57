"""Translation registration across trigger delays and maximum-selection fusion.

Shifts follow ``np.roll`` semantics: applying ``(dx, dy)`` to an image moves
its content ``dx`` columns right and ``dy`` rows down, circularly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .scattering import FeatureStack


@dataclass(eq=False)
class RegistrationResult:
    dx: int
    dy: int
    score: float
    registered: np.ndarray


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    return np.roll(np.asarray(img), (dy, dx), axis=(0, 1))


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def _candidates(window: int):
    shifts = [(dx, dy) for dx in range(-window, window + 1) for dy in range(-window, window + 1)]
    # visiting order implements the tie-break: only strictly better scores replace the best
    return sorted(shifts, key=lambda s: (s[0] ** 2 + s[1] ** 2, s[0], s[1]))


def register_translation(moving: np.ndarray, reference: np.ndarray, window: int = 8,
                         mask: np.ndarray | None = None) -> RegistrationResult:
    """Exhaustive integer-shift search maximising NCC inside the reference mask.

    Every shift with ``|dx|, |dy| <= window`` is scored by the normalised
    cross-correlation between the shifted ``moving`` image and ``reference``
    over ``mask`` (whole raster if omitted). Ties go to the smallest shift
    norm, then the smallest ``dx``, then the smallest ``dy``. A moving image
    with no variance in the mask scores 0.
    """
    mov = np.asarray(moving, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if mov.shape != ref.shape or mov.ndim != 2:
        raise DataError(f"registration needs equal 2-D extents, got {mov.shape} and {ref.shape}")
    if window < 0:
        raise DataError(f"search window must be >= 0, got {window}")
    m = np.ones(ref.shape, bool) if mask is None else np.asarray(mask, bool)
    if m.shape != ref.shape:
        raise DataError(f"mask extents {m.shape} do not match images {ref.shape}")
    r = ref[m]
    if r.size < 2 or np.all(r == r[0]):
        raise DataError("reference image has zero variance inside the mask; registration is undefined")

    best = None
    for dx, dy in _candidates(window):
        score = _ncc(shift_image(mov, dx, dy)[m], r)
        if best is None or score > best[0]:
            best = (score, dx, dy)
    score, dx, dy = best
    return RegistrationResult(dx, dy, score, shift_image(mov, dx, dy))


def select_reference(series: np.ndarray, mask: np.ndarray | None = None) -> int:
    """Index of the TD with the highest total ROI energy over all its images.

    ``series`` is (n_tds, n_images, H, W) or (n_tds, H, W). Ties keep the
    earliest TD.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim == 3:
        s = s[:, None]
    if s.ndim != 4 or len(s) == 0:
        raise DataError(f"expected (n_tds, [n_images,] H, W), got shape {series.shape}")
    m = np.ones(s.shape[-2:], bool) if mask is None else np.asarray(mask, bool)
    energy = np.sum(s[..., m] ** 2, axis=(1, 2))
    return int(np.argmax(energy))


def register_series(series: np.ndarray, reference_td: int, window: int = 8,
                    mask: np.ndarray | None = None, channel: int = 0):
    """Align every TD to ``reference_td``.

    The shift for each TD is estimated on image ``channel`` (b0 by default)
    and then applied to all of that TD's images. Returns the registered
    series and the per-TD results.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 4:
        raise DataError(f"expected (n_tds, n_images, H, W), got shape {s.shape}")
    if not 0 <= reference_td < len(s):
        raise DataError(f"reference TD {reference_td} out of range for {len(s)} TDs")
    ref = s[reference_td, channel]
    out = np.empty_like(s)
    results = []
    for td in range(len(s)):
        res = register_translation(s[td, channel], ref, window, mask)
        out[td] = np.roll(s[td], (res.dy, res.dx), axis=(1, 2))
        results.append(res)
    return out, results


def fuse_pair(a: FeatureStack, b: FeatureStack) -> FeatureStack:
    """Elementwise maximum of two compatible stacks."""
    if (a.J, a.L, a.source_shape) != (b.J, b.L, b.source_shape):
        raise DataError(f"stacks differ in (J, L, source extents): "
                        f"{(a.J, a.L, a.source_shape)} vs {(b.J, b.L, b.source_shape)}")
    if a.count != b.count:
        raise DataError(f"stacks differ in map count: {a.count} vs {b.count}")
    for i in range(a.count):
        if a.maps[i].shape != b.maps[i].shape:
            raise DataError(f"map {i} extents differ: {a.maps[i].shape} vs {b.maps[i].shape}")
    return FeatureStack(np.maximum(a.maps, b.maps), a.J, a.L, a.source_shape, dict(a.extra))


def fuse_all(stacks: Sequence[FeatureStack]) -> FeatureStack:
    """Left fold of :func:`fuse_pair`; equals the global elementwise maximum."""
    stacks = list(stacks)
    if not stacks:
        raise DataError("fuse_all needs at least one stack")
    out = stacks[0]
    for s in stacks[1:]:
        out = fuse_pair(out, s)
    return out


def tmip_baseline(images: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel maximum across TD images."""
    images = [np.asarray(i, dtype=np.float64) for i in images]
    if not images:
        raise DataError("tmip_baseline needs at least one image")
    shape = images[0].shape
    for k, img in enumerate(images):
        if img.shape != shape:
            raise DataError(f"image {k} extents {img.shape} differ from {shape}")
    return np.max(np.stack(images), axis=0)
