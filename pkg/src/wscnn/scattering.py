"""First-order wavelet scattering of 2-D images.

``scatter`` returns 1 + J*L maps: the low-passed image followed by the
low-passed wavelet moduli, ordered by scale then orientation. All filtering
is circular, and subsampling keeps every ``2**J``-th sample starting at 0,
so a circular shift by ``2**J`` pixels shifts every map by exactly one
sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from .errors import DataError
from .filterbank import FilterBank
from .io import read_rasters, write_rasters


@dataclass(eq=False)
class FeatureStack:
    """Scattering maps of one image, shape (1 + J*L, ceil(H/2^J), ceil(W/2^J))."""

    maps: np.ndarray
    J: int
    L: int
    source_shape: tuple[int, int]
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise DataError(f"feature maps must be (count, h, w), got shape {self.maps.shape}")
        if self.maps.shape[0] != 1 + self.J * self.L:
            raise DataError(f"expected {1 + self.J * self.L} maps for J={self.J}, L={self.L}, "
                            f"got {self.maps.shape[0]}")
        self.source_shape = tuple(int(v) for v in self.source_shape)

    @property
    def count(self) -> int:
        return self.maps.shape[0]

    @property
    def map_shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    @property
    def s0(self) -> np.ndarray:
        return self.maps[0]

    @property
    def s1(self) -> np.ndarray:
        """First-order maps reshaped to (J, L, h, w)."""
        return self.maps[1:].reshape(self.J, self.L, *self.map_shape)

    def meta(self) -> dict[str, str]:
        return {"kind": "feature_stack", "J": str(self.J), "L": str(self.L),
                "source_height": str(self.source_shape[0]),
                "source_width": str(self.source_shape[1]), **self.extra}

    def compatible_with(self, other: "FeatureStack") -> bool:
        return (self.maps.shape == other.maps.shape and self.J == other.J and self.L == other.L
                and self.source_shape == other.source_shape)

    def energy(self, first_order_only: bool = False) -> float:
        maps = self.maps[1:] if first_order_only else self.maps
        return float(np.sum(maps ** 2))


def save_stack(path, stack: FeatureStack) -> None:
    write_rasters(path, list(stack.maps), stack.meta())


def load_stack(path) -> FeatureStack:
    maps, meta = read_rasters(path)
    try:
        J, L = int(meta.pop("J")), int(meta.pop("L"))
        shape = (int(meta.pop("source_height")), int(meta.pop("source_width")))
    except KeyError as exc:
        raise DataError(f"{path}: feature stack metadata lacks {exc}") from exc
    meta.pop("kind", None)
    if not maps:
        raise DataError(f"{path}: empty feature stack")
    return FeatureStack(np.stack(maps), J, L, shape, extra=meta)


def _check_extents(x: np.ndarray, bank: FilterBank) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"image must be 2-D, got shape {x.shape}")
    if x.shape != bank.shape:
        raise DataError(f"image extents {x.shape} do not match filter bank {bank.shape}")
    return x


def prepare(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Zero-fill pixels outside ``mask`` (if given)."""
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        return x
    return np.where(mask, x, 0.0)


def propagate_u1(x: np.ndarray, bank: FilterBank, mask: np.ndarray | None = None) -> np.ndarray:
    """Full-resolution wavelet moduli |x * psi_{j,r}|, shape (J, L, H, W)."""
    x = _check_extents(prepare(x, mask), bank)
    xf = sfft.fft2(x)
    return np.abs(sfft.ifft2(xf[None, None] * bank.psi_hat))


def _lowpass_subsample(a: np.ndarray, bank: FilterBank, nonnegative: bool) -> np.ndarray:
    step = 2 ** bank.J
    spec = sfft.fft2(a) * bank.phi_hat
    H, W = bank.shape
    if H % step == 0 and W % step == 0:
        # subsampling by `step` in space folds the spectrum onto an (H/step, W/step)
        # grid, so the inverse transform runs at the output size
        h, w = H // step, W // step
        folded = spec.reshape(*spec.shape[:-2], step, h, step, w).sum(axis=(-4, -2)) / (step * step)
        out = sfft.ifft2(folded).real
    else:
        out = sfft.ifft2(spec).real[..., ::step, ::step]
    if nonnegative:
        # phi is a nonnegative Gaussian: anything below zero is FFT round-off
        out = np.maximum(out, 0.0)
    return out


def scatter(x: np.ndarray, bank: FilterBank, mask: np.ndarray | None = None) -> FeatureStack:
    """Scattering maps S0 = (x * phi) and S1 = (|x * psi| * phi), subsampled by 2^J."""
    x = _check_extents(prepare(x, mask), bank)
    s0 = _lowpass_subsample(x, bank, nonnegative=bool(x.min() >= 0))
    s1 = _lowpass_subsample(propagate_u1(x, bank), bank, nonnegative=True)
    maps = np.concatenate([s0[None], s1.reshape(-1, *s0.shape)], axis=0)
    return FeatureStack(maps, bank.J, bank.L, x.shape)


def scatter_batch(images: Sequence[np.ndarray], bank: FilterBank,
                  mask: np.ndarray | None = None) -> list[FeatureStack]:
    return [scatter(img, bank, mask) for img in images]


def stack_shape(height: int, width: int, J: int) -> tuple[int, int]:
    step = 2 ** J
    return (-(-height // step), -(-width // step))
