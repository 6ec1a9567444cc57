"""Analytic cardiac DW phantom and multi-TD motion corruption.

The phantom is a short-axis annulus whose fibres sit in the local tangent
plane with a helix angle varying linearly from endocardium to epicardium.
Corruption deforms each trigger delay (TD) with a smooth random field and
attenuates horizontal bands of the DW images to mimic motion-induced
signal loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dti import CardiacFrame, GradientScheme, TensorField, default_scheme, synthesize
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 96
    width: int = 160
    center: tuple[float, float] | None = None  # (row, col); defaults to the raster centre
    inner_radius: float = 18.0
    outer_radius: float = 30.0
    ha_endo: float = 60.0
    ha_epi: float = -60.0
    eigenvalues: tuple[float, float, float] = (1.5e-3, 0.5e-3, 0.3e-3)
    s0: float = 1.0
    noise_sigma: float = 0.0
    b: float = 1000.0
    n_directions: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"phantom extents must be positive, got {self.height}x{self.width}")
        if not 0 < self.inner_radius < self.outer_radius:
            raise ConfigError("radii must satisfy 0 < inner < outer, got "
                              f"{self.inner_radius}, {self.outer_radius}")
        if self.outer_radius > min(self.height, self.width) / 2:
            raise ConfigError(f"outer radius {self.outer_radius} exceeds half the smaller extent")
        l1, l2, l3 = self.eigenvalues
        if not l1 >= l2 >= l3 > 0:
            raise ConfigError(f"eigenvalues must satisfy l1 >= l2 >= l3 > 0, got {self.eigenvalues}")
        if not self.s0 > 0:
            raise ConfigError(f"S0 level must be positive, got {self.s0}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    @property
    def center_rc(self) -> tuple[float, float]:
        if self.center is None:
            return (self.height / 2.0, self.width / 2.0)
        return (float(self.center[0]), float(self.center[1]))


@dataclass(eq=False)
class Phantom:
    """Ground truth for one slice; ``images`` stacks b0 first, then the DW images."""

    spec: PhantomSpec
    scheme: GradientScheme
    s0: np.ndarray
    dwis: np.ndarray
    mask: np.ndarray
    tensors: TensorField
    frame: CardiacFrame
    helix: np.ndarray
    depth: np.ndarray

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.s0[None], self.dwis], axis=0)


def _fibre_frame(spec: PhantomSpec):
    frame = CardiacFrame(spec.center_rc)
    c_hat, r_hat, z_hat, radius = frame.basis((spec.height, spec.width))
    mask = (radius >= spec.inner_radius) & (radius <= spec.outer_radius)
    depth = np.where(mask, (radius - spec.inner_radius) / (spec.outer_radius - spec.inner_radius), np.nan)
    helix = np.where(mask, spec.ha_endo + (spec.ha_epi - spec.ha_endo) * depth, np.nan)
    return frame, mask, depth, helix, c_hat, r_hat, z_hat


def make_phantom(spec: PhantomSpec | None = None) -> Phantom:
    """Build b0 + DW images, mask, tensors and frame from ``spec``.

    Fibres are ``e1 = cos(HA) c + sin(HA) z``, ``e2 = r``, ``e3 = e1 x e2``.
    Voxels outside the annulus are exactly zero in every image. Rician noise
    of ``noise_sigma`` (if positive) is added inside the annulus only.
    """
    spec = spec or PhantomSpec()
    scheme = default_scheme(spec.n_directions, spec.b)
    frame, mask, depth, helix, c_hat, r_hat, z_hat = _fibre_frame(spec)

    ha = np.radians(np.nan_to_num(helix))
    e1 = np.cos(ha)[..., None] * np.nan_to_num(c_hat) + np.sin(ha)[..., None] * z_hat
    e2 = np.nan_to_num(r_hat)
    e3 = np.cross(e1, e2)
    rot = np.stack([e1, e2, e3], axis=-1)
    lam = np.asarray(spec.eigenvalues, dtype=np.float64)
    dmat = np.einsum("...ik,k,...jk->...ij", rot, lam, rot)
    dmat[~mask] = 0.0
    comp = np.stack([dmat[..., 0, 0], dmat[..., 1, 1], dmat[..., 2, 2],
                     dmat[..., 0, 1], dmat[..., 0, 2], dmat[..., 1, 2]], axis=-1)

    s0 = np.where(mask, spec.s0, 0.0)
    dwis = synthesize(s0, comp, scheme)
    dwis[:, ~mask] = 0.0

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        s0 = _rician(s0, spec.noise_sigma, mask, rng)
        dwis = np.stack([_rician(d, spec.noise_sigma, mask, rng) for d in dwis])

    # ground-truth eigensystem is stored directly rather than re-derived numerically
    evals = np.where(mask[..., None], lam, 0.0)
    evecs = np.where(mask[..., None, None], rot, 0.0)
    tensors = TensorField(comp, mask.copy(), evals, evecs)
    return Phantom(spec, scheme, s0, dwis, mask, tensors, frame, helix, depth)


def _rician(signal: np.ndarray, sigma: float, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n1 = rng.normal(0.0, sigma, signal.shape)
    n2 = rng.normal(0.0, sigma, signal.shape)
    noisy = np.sqrt((signal + n1) ** 2 + n2 ** 2)
    return np.where(mask, noisy, 0.0)


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-pixel backward displacements: output (r, c) samples input (r + dy, c + dx)."""

    dy: np.ndarray
    dx: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.dy.shape

    @classmethod
    def identity(cls, shape) -> "DeformationField":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def translation(cls, shape, dy: float, dx: float) -> "DeformationField":
        return cls(np.full(shape, float(dy)), np.full(shape, float(dx)))

    def max_displacement(self) -> float:
        return float(np.max(np.hypot(self.dy, self.dx))) if self.dy.size else 0.0


def _bilinear_upsample(grid: np.ndarray, shape: tuple[int, int], spacing: float) -> np.ndarray:
    """Interpolate control-point values (node k at pixel k*spacing) onto every pixel."""
    rows = np.arange(shape[0]) / spacing
    cols = np.arange(shape[1]) / spacing
    r0 = np.minimum(np.floor(rows).astype(int), grid.shape[0] - 2)
    c0 = np.minimum(np.floor(cols).astype(int), grid.shape[1] - 2)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    g00 = grid[r0][:, c0]
    g01 = grid[r0][:, c0 + 1]
    g10 = grid[r0 + 1][:, c0]
    g11 = grid[r0 + 1][:, c0 + 1]
    return (1 - fr) * ((1 - fc) * g00 + fc * g01) + fr * ((1 - fc) * g10 + fc * g11)


def make_deformation(shape: tuple[int, int], amplitude: float, grid_spacing: float,
                     seed) -> DeformationField:
    """Smooth random field from control vectors of norm <= ``amplitude``.

    Control points sit every ``grid_spacing`` pixels (covering the raster);
    bilinear interpolation keeps every pixel's displacement inside the
    convex hull of its four nodes, so the amplitude bound carries over.
    """
    if amplitude < 0:
        raise ConfigError(f"deformation amplitude must be >= 0, got {amplitude}")
    if not grid_spacing > 0:
        raise ConfigError(f"grid spacing must be positive, got {grid_spacing}")
    h, w = shape
    if amplitude == 0:
        return DeformationField.identity(shape)
    ny = max(2, int(np.ceil((h - 1) / grid_spacing)) + 1)
    nx = max(2, int(np.ceil((w - 1) / grid_spacing)) + 1)
    rng = np.random.default_rng(seed)
    angle = rng.uniform(0.0, 2 * np.pi, (ny, nx))
    magnitude = amplitude * np.sqrt(rng.uniform(0.0, 1.0, (ny, nx)))
    dy = _bilinear_upsample(magnitude * np.sin(angle), shape, grid_spacing)
    dx = _bilinear_upsample(magnitude * np.cos(angle), shape, grid_spacing)
    return DeformationField(dy, dx)


def warp(img: np.ndarray, deformation: DeformationField) -> np.ndarray:
    """Backward bilinear warp; samples falling outside the raster read as zero."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != deformation.shape:
        raise DataError(f"image extents {img.shape} do not match field {deformation.shape}")
    h, w = img.shape
    rows, cols = np.indices(img.shape, dtype=np.float64)
    y = rows + deformation.dy
    x = cols + deformation.dx
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    fy = y - y0
    fx = x - x0

    def tap(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(ok, img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)

    out = (1 - fy) * (1 - fx) * tap(y0, x0)
    out = out + (1 - fy) * fx * tap(y0, x0 + 1)
    out = out + fy * (1 - fx) * tap(y0 + 1, x0)
    out = out + fy * fx * tap(y0 + 1, x0 + 1)
    return out


# ---------------------------------------------------------------------------
# multi-TD corruption
# ---------------------------------------------------------------------------

BAND_PROFILES = ("cosine", "box")


@dataclass(frozen=True)
class CorruptionSpec:
    n_tds: int = 10
    amplitude: float = 3.0
    grid_spacing: float = 64.0  # control-grid spacing (px): larger is smoother, closer to rigid
    bands: int = 2
    band_width: int = 24
    attenuation: float = 0.3  # multiplier inside a band: 1 means no loss
    band_profile: str = "cosine"  # "cosine": smooth dip reaching `attenuation` mid-band; "box": flat
    seed: int = 0

    def __post_init__(self):
        if self.n_tds < 1:
            raise ConfigError(f"n_tds must be >= 1, got {self.n_tds}")
        if self.amplitude < 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude}")
        if not self.grid_spacing > 0:
            raise ConfigError(f"grid spacing must be positive, got {self.grid_spacing}")
        if self.bands < 0 or self.band_width < 1:
            raise ConfigError(f"need bands >= 0 and band_width >= 1, got {self.bands}, {self.band_width}")
        if not 0 <= self.attenuation <= 1:
            raise ConfigError(f"attenuation must lie in [0, 1], got {self.attenuation}")
        if self.band_profile not in BAND_PROFILES:
            raise ConfigError(f"band_profile must be one of {BAND_PROFILES}, got {self.band_profile!r}")

    def td_seed(self, td: int) -> np.random.SeedSequence:
        """Independent stream for TD index ``td`` (0-based)."""
        return np.random.SeedSequence([self.seed, td])


@dataclass(frozen=True)
class Band:
    image: int  # index into the b0-first image stack
    row: int
    width: int
    factor: float
    profile: str = "box"

    def weights(self) -> np.ndarray:
        """Per-row multipliers for rows ``row .. row + width - 1``."""
        if self.profile == "box":
            return np.full(self.width, self.factor)
        # raised cosine: 1 just outside the band, `factor` at its centre
        t = (np.arange(self.width) + 0.5) / self.width
        return 1.0 - (1.0 - self.factor) * 0.5 * (1.0 - np.cos(2 * np.pi * t))


@dataclass(eq=False)
class TDRecord:
    td: int
    deformation: DeformationField
    bands: list[Band] = field(default_factory=list)


@dataclass(eq=False)
class CorruptedSeries:
    """``tds`` has shape (n_tds, n_images, H, W); TD 0 is the untouched clean set."""

    tds: np.ndarray
    records: list[TDRecord]
    cspec: CorruptionSpec

    @property
    def n_tds(self) -> int:
        return self.tds.shape[0]


def apply_record(images: np.ndarray, record: TDRecord) -> np.ndarray:
    """Replay one TD's deformation and bands on a b0-first image stack."""
    out = np.stack([warp(img, record.deformation) for img in images])
    for band in record.bands:
        out[band.image, band.row:band.row + band.width] *= band.weights()[:, None]
    return out


def corrupt(images: np.ndarray, cspec: CorruptionSpec | None = None,
            mask: np.ndarray | None = None) -> CorruptedSeries:
    """Simulate ``n_tds`` acquisitions of a b0-first image stack.

    TD 0 is the clean stack. Every later TD gets its own smooth deformation
    (shared by all its images) and, independently for each DW image, ``bands``
    horizontal stripes multiplied by ``attenuation``; b0 is never striped.
    Stripe rows are drawn so each stripe overlaps the rows spanned by
    ``mask`` when one is given.
    """
    cspec = cspec or CorruptionSpec()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise DataError(f"expected a (n_images, H, W) stack, got shape {images.shape}")
    n_img, h, w = images.shape
    bw = min(cspec.band_width, h)
    if mask is not None and np.asarray(mask, bool).any():
        rows = np.nonzero(np.asarray(mask, bool).any(axis=1))[0]
        lo, hi = max(0, rows[0] - bw + 1), min(h - bw, rows[-1])
    else:
        lo, hi = 0, h - bw

    tds = [images.copy()]
    records = [TDRecord(0, DeformationField.identity((h, w)))]
    for td in range(1, cspec.n_tds):
        seeds = cspec.td_seed(td).spawn(2)
        deformation = make_deformation((h, w), cspec.amplitude, cspec.grid_spacing, seeds[0])
        rng = np.random.default_rng(seeds[1])
        bands = [Band(i, int(rng.integers(lo, hi + 1)), bw, cspec.attenuation, cspec.band_profile)
                 for i in range(1, n_img) for _ in range(cspec.bands)]
        record = TDRecord(td, deformation, bands)
        tds.append(apply_record(images, record))
        records.append(record)
    return CorruptedSeries(np.stack(tds), records, cspec)
