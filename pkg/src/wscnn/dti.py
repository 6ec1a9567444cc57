"""Diffusion-tensor fitting and cardiac fibre metrics.

Coordinates: a voxel at (row, col) sits at the 3-D point (x=col, y=row, z=0);
tensor components and gradient directions use the same (x, y, z) axes, with
z through the slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

# component order of the six unique tensor entries
COMPONENTS = ("Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz")


@dataclass(frozen=True, eq=False)
class GradientScheme:
    b: float
    directions: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ConfigError(f"directions must be (n, 3), got shape {d.shape}")
        if len(d) < 6:
            raise ConfigError(f"at least 6 gradient directions are needed, got {len(d)}")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1) > 1e-9):
            raise ConfigError("gradient directions must be unit vectors")
        if np.linalg.matrix_rank(design_matrix(d)) < 6:
            raise ConfigError("gradient directions do not determine a full tensor (rank < 6)")
        if not self.b > 0:
            raise ConfigError(f"b-value must be positive, got {self.b}")
        d.setflags(write=False)
        object.__setattr__(self, "directions", d)

    @property
    def n(self) -> int:
        return len(self.directions)


def hemisphere_directions(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on the upper hemisphere (golden spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z ** 2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def default_scheme(n: int = 12, b: float = 1000.0) -> GradientScheme:
    return GradientScheme(b, hemisphere_directions(n))


def design_matrix(directions: np.ndarray) -> np.ndarray:
    g = np.asarray(directions, dtype=np.float64)
    gx, gy, gz = g.T
    return np.stack([gx * gx, gy * gy, gz * gz, 2 * gx * gy, 2 * gx * gz, 2 * gy * gz], axis=1)


def components_to_matrix(comp: np.ndarray) -> np.ndarray:
    """(..., 6) components -> (..., 3, 3) symmetric matrices."""
    comp = np.asarray(comp, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(comp, -1, 0)
    rows = [np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)]
    return np.stack(rows, axis=-2)


def matrix_to_components(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2],
                     m[..., 0, 1], m[..., 0, 2], m[..., 1, 2]], axis=-1)


def synthesize(s0: np.ndarray, comp: np.ndarray, scheme: GradientScheme) -> np.ndarray:
    """Noiseless signals S_i = S0 exp(-b g_i^T D g_i), shape (n, ...)."""
    adc = np.moveaxis(np.asarray(comp) @ design_matrix(scheme.directions).T, -1, 0)
    return np.asarray(s0)[None] * np.exp(-scheme.b * adc)


# ---------------------------------------------------------------------------
# eigen-decomposition
# ---------------------------------------------------------------------------

def eig_sym3(d: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60):
    """Cyclic Jacobi eigen-decomposition of symmetric 3x3 matrices.

    Parameters
    ----------
    d : array_like, shape (..., 3, 3)
        Symmetric matrices; only the upper triangle is trusted.
    tol : float
        Sweeps stop once every off-diagonal norm is below ``tol`` times the
        matrix Frobenius norm.

    Returns
    -------
    evals : ndarray, shape (..., 3)
        Eigenvalues sorted in descending order.
    evecs : ndarray, shape (..., 3, 3)
        Matching unit eigenvectors in the columns, each signed so that its
        largest-magnitude component is positive.
    """
    a = np.array(d, dtype=np.float64, copy=True)
    if a.shape[-2:] != (3, 3):
        raise DataError(f"eig_sym3 expects (..., 3, 3) matrices, got {a.shape}")
    batch = a.shape[:-2]
    a = a.reshape(-1, 3, 3)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    scale = np.linalg.norm(a, axis=(1, 2))
    limit = tol * np.where(scale > 0, scale, 1.0)

    # tiny off-diagonals overflow theta to inf, which correctly gives t = 0
    with np.errstate(over="ignore"):
        a, v = _jacobi_sweeps(a, v, limit, max_sweeps)
    return _sorted_eigensystem(a, v, batch)


def _jacobi_sweeps(a, v, limit, max_sweeps):
    for _ in range(max_sweeps):
        off = np.sqrt(a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2)
        if np.all(off < limit):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p, q]
            active = np.abs(apq) > 0
            theta = np.where(active, (a[:, q, q] - a[:, p, p]) / np.where(active, 2 * apq, 1.0), 0.0)
            t = np.where(active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            t = np.where(active & (theta == 0), 1.0, t)
            c = 1.0 / np.sqrt(t ** 2 + 1)
            s = t * c
            rot = np.broadcast_to(np.eye(3), a.shape).copy()
            rot[:, p, p] = c
            rot[:, q, q] = c
            rot[:, p, q] = s
            rot[:, q, p] = -s
            a = np.swapaxes(rot, 1, 2) @ a @ rot
            v = v @ rot
    return a, v


def _sorted_eigensystem(a, v, batch):
    evals = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    idx = np.argmax(np.abs(v), axis=1)
    signs = np.sign(np.take_along_axis(v, idx[:, None, :], axis=1))
    v = v * np.where(signs == 0, 1.0, signs)
    return evals.reshape(*batch, 3), v.reshape(*batch, 3, 3)


def fa(l1, l2, l3):
    """Fractional anisotropy; NaN where all three eigenvalues are zero."""
    l1, l2, l3 = (np.asarray(v, dtype=np.float64) for v in (l1, l2, l3))
    num = (l1 - l2) ** 2 + (l1 - l3) ** 2 + (l2 - l3) ** 2
    den = l1 ** 2 + l2 ** 2 + l3 ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(0.5 * num / den)
    out = np.where(den > 0, out, np.nan)
    return out[()] if out.ndim == 0 else out


def md(l1, l2, l3):
    return (np.asarray(l1) + np.asarray(l2) + np.asarray(l3)) / 3.0


# ---------------------------------------------------------------------------
# tensor fitting
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TensorField:
    """Per-voxel tensors on an (H, W) raster.

    ``components`` is (H, W, 6) in :data:`COMPONENTS` order; ``evecs`` holds
    e1, e2, e3 in its last-axis columns. Derived maps are NaN where
    ``fit_ok`` is false.
    """

    components: np.ndarray
    fit_ok: np.ndarray
    evals: np.ndarray
    evecs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.fit_ok.shape

    @property
    def spd(self) -> np.ndarray:
        return self.fit_ok & np.all(self.evals > 0, axis=-1)

    @property
    def e1(self) -> np.ndarray:
        return self.evecs[..., :, 0]

    def _masked(self, values: np.ndarray) -> np.ndarray:
        return np.where(self.fit_ok, values, np.nan)

    @property
    def fa(self) -> np.ndarray:
        ok = self.fit_ok & np.any(self.evals != 0, axis=-1)
        with np.errstate(invalid="ignore"):
            vals = fa(*np.moveaxis(self.evals, -1, 0))
        return np.where(ok, vals, np.nan)

    @property
    def md(self) -> np.ndarray:
        return self._masked(md(*np.moveaxis(self.evals, -1, 0)))

    @property
    def trace_md(self) -> np.ndarray:
        c = self.components
        return self._masked((c[..., 0] + c[..., 1] + c[..., 2]) / 3.0)

    @classmethod
    def from_components(cls, comp: np.ndarray, fit_ok: np.ndarray) -> "TensorField":
        comp = np.where(fit_ok[..., None], comp, 0.0)
        evals, evecs = eig_sym3(components_to_matrix(comp))
        return cls(comp, fit_ok.astype(bool), evals, evecs)


def fit_tensor(s0: np.ndarray, dwis: Sequence[np.ndarray], scheme: GradientScheme,
               mask: np.ndarray | None = None) -> TensorField:
    """Log-linear least-squares tensor fit.

    Voxels outside ``mask``, or with S0 or any S_i at or below
    ``1e-6 * max(S0)``, are flagged ``fit_ok = False`` and get a zero tensor.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    dw = np.asarray(dwis, dtype=np.float64)
    if dw.ndim != 3 or dw.shape[0] != scheme.n:
        raise DataError(f"expected {scheme.n} DW images, got array of shape {dw.shape}")
    if dw.shape[1:] != s0.shape:
        raise DataError(f"DW image extents {dw.shape[1:]} do not match S0 extents {s0.shape}")
    mask = np.ones(s0.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != s0.shape:
        raise DataError(f"mask extents {mask.shape} do not match S0 extents {s0.shape}")

    peak = float(np.max(s0[mask])) if mask.any() else 0.0
    eps = 1e-6 * peak
    ok = mask & (s0 > eps) & np.all(dw > eps, axis=0)
    y = np.zeros((scheme.n,) + s0.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        y[:, ok] = np.log(s0[ok][None] / dw[:, ok]) / scheme.b
    pinv = np.linalg.pinv(design_matrix(scheme.directions))
    comp = np.einsum("kn,n...->...k", pinv, y)
    return TensorField.from_components(comp, ok)


# ---------------------------------------------------------------------------
# cardiac geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CardiacFrame:
    """Left-ventricle centre (row, col) and long axis for one slice."""

    center: tuple[float, float]
    long_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def basis(self, shape: tuple[int, int]):
        """Circumferential, radial and longitudinal unit vectors per voxel.

        Returns ``(c_hat, r_hat, z_hat, radius)``: three (H, W, 3) arrays with
        ``c_hat x r_hat = z_hat``, and the in-plane distance from the centre.
        Vectors are NaN where the radius is 0.5 px or less.
        """
        z = np.asarray(self.long_axis, dtype=np.float64)
        z = z / np.linalg.norm(z)
        rows, cols = np.indices(shape, dtype=np.float64)
        p = np.stack([cols - self.center[1], rows - self.center[0], np.zeros(shape)], axis=-1)
        p = p - (p @ z)[..., None] * z
        radius = np.linalg.norm(p, axis=-1)
        valid = radius > 0.5
        with np.errstate(invalid="ignore", divide="ignore"):
            r_hat = np.where(valid[..., None], p / radius[..., None], np.nan)
        z_hat = np.broadcast_to(z, r_hat.shape).copy()
        c_hat = np.cross(r_hat, z_hat)
        return c_hat, r_hat, z_hat, radius


def frame_from_mask(mask: np.ndarray, long_axis=(0.0, 0.0, 1.0)) -> CardiacFrame:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise DataError("cannot place an LV centre on an empty mask")
    rows, cols = np.nonzero(mask)
    return CardiacFrame((float(rows.mean()), float(cols.mean())), tuple(long_axis))


def helix_transverse(e1: np.ndarray, frame: CardiacFrame):
    """Helix and transverse angles in degrees for an (H, W, 3) fibre field.

    The fibre is first signed so its circumferential component is
    non-negative (positive longitudinal component on ties). HA is the
    elevation of its projection on span{c, z}; TA the angle of its projection
    on span{c, r}. Both lie in [-90, 90] and are NaN where the frame is
    undefined or the fibre is missing.
    """
    e1 = np.asarray(e1, dtype=np.float64)
    c_hat, r_hat, z_hat, _ = frame.basis(e1.shape[:2])
    ec = np.sum(e1 * c_hat, axis=-1)
    er = np.sum(e1 * r_hat, axis=-1)
    ez = np.sum(e1 * z_hat, axis=-1)
    flip = (ec < 0) | ((ec == 0) & (ez < 0))
    sign = np.where(flip, -1.0, 1.0)
    ec, er, ez = ec * sign, er * sign, ez * sign
    ha = np.degrees(np.arctan2(ez, ec))
    ta = np.degrees(np.arctan2(er, ec))
    return ha, ta


def deviation_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sign-insensitive angle in degrees between unit vectors (last axis)."""
    dot = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return np.degrees(np.arccos(np.clip(dot, 0.0, 1.0)))


def screen_angle(frame: CardiacFrame, shape: tuple[int, int]) -> np.ndarray:
    """Angle in degrees [0, 360) from 12 o'clock, increasing counterclockwise on screen."""
    rows, cols = np.indices(shape, dtype=np.float64)
    dx = cols - frame.center[1]
    up = frame.center[0] - rows
    return np.degrees(np.arctan2(-dx, up)) % 360.0


def transmural_depth(mask: np.ndarray, frame: CardiacFrame, n_bins: int = 72) -> np.ndarray:
    """Normalised depth in [0, 1] from the inner (0) to the outer (1) mask boundary.

    Inner and outer radii are estimated per angular bin from the mask
    voxels; NaN outside the mask.
    """
    mask = np.asarray(mask, bool)
    _, _, _, radius = frame.basis(mask.shape)
    angle = screen_angle(frame, mask.shape)
    bins = np.minimum((angle / (360.0 / n_bins)).astype(int), n_bins - 1)
    depth = np.full(mask.shape, np.nan)
    for k in range(n_bins):
        sel = mask & (bins == k)
        if not sel.any():
            continue
        r = radius[sel]
        lo, hi = r.min(), r.max()
        depth[sel] = (r - lo) / (hi - lo) if hi > lo else 0.5
    return depth


@dataclass
class Bullseye:
    """Per (segment, layer) means; layer 0 is endocardial. Missing bins are NaN."""

    means: np.ndarray
    counts: np.ndarray
    labels: tuple[str, ...] = field(default=("anterior", "anteroseptal", "inferoseptal",
                                             "inferior", "inferolateral", "anterolateral"))

    @property
    def missing(self) -> np.ndarray:
        return self.counts == 0

    def rows(self):
        for s in range(self.means.shape[0]):
            for layer in range(self.means.shape[1]):
                m = self.means[s, layer]
                yield (s + 1, layer, None if np.isnan(m) else float(m), int(self.counts[s, layer]))


def aha_bullseye(values: np.ndarray, mask: np.ndarray, frame: CardiacFrame,
                 n_segments: int = 6, n_layers: int = 3) -> Bullseye:
    """Segmental means of ``values`` over an annular ``mask``.

    Segment 1 is centred at 12 o'clock and numbering proceeds counterclockwise
    on screen; layers split the normalised transmural depth into equal parts.
    NaN values are ignored.
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, bool)
    if values.shape != mask.shape:
        raise DataError(f"values extents {values.shape} do not match mask {mask.shape}")
    width = 360.0 / n_segments
    seg = (((screen_angle(frame, mask.shape) + width / 2) % 360.0) // width).astype(int)
    seg = np.minimum(seg, n_segments - 1)
    depth = transmural_depth(mask, frame)
    layer = np.minimum((np.nan_to_num(depth) * n_layers).astype(int), n_layers - 1)
    use = mask & np.isfinite(values)
    means = np.full((n_segments, n_layers), np.nan)
    counts = np.zeros((n_segments, n_layers), dtype=int)
    for s in range(n_segments):
        for k in range(n_layers):
            sel = use & (seg == s) & (layer == k)
            counts[s, k] = int(sel.sum())
            if counts[s, k]:
                means[s, k] = float(values[sel].mean())
    labels = Bullseye.__dataclass_fields__["labels"].default
    if n_segments != 6:
        labels = tuple(f"segment{i + 1}" for i in range(n_segments))
    return Bullseye(means, counts, labels)
