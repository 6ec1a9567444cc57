"""Frequency-domain Morlet filter bank for 2-D scattering.

Filters are sampled on the DFT grid of a fixed raster, so every convolution
downstream is circular. The bank holds J*L complex band-pass wavelets at
orientations ``theta_r = pi * r / L`` and one real Gaussian low-pass at
scale ``2**J``.

Frequency vectors are ordered (row, column): an orientation ``theta`` points
along ``(cos theta, sin theta)`` in (omega_row, omega_col).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError, DataError

# image copies summed per axis when periodising the continuous Gaussians
_ALIASES = range(-2, 3)


@dataclass(frozen=True)
class BankParams:
    J: int = 2
    L: int = 10
    sigma0: float = 0.55
    xi0: float = 3 * np.pi / 4
    slant: float | None = None  # defaults to 4 / L
    normalize: bool = True

    def __post_init__(self):
        if self.J < 1:
            raise ConfigError(f"J must be >= 1, got {self.J}")
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if not self.sigma0 > 0:
            raise ConfigError(f"sigma0 must be positive, got {self.sigma0}")
        if not 0 < self.xi0 < np.pi:
            raise ConfigError(f"xi0 must lie in (0, pi), got {self.xi0}")
        if self.slant is not None and not self.slant > 0:
            raise ConfigError(f"slant must be positive, got {self.slant}")

    @property
    def slant_value(self) -> float:
        return 4.0 / self.L if self.slant is None else float(self.slant)

    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.L) / self.L


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Sampled filters for one raster size.

    ``psi_hat`` has shape (J, L, H, W) (real-valued on the frequency grid,
    complex in space); ``phi_hat`` has shape (H, W). ``xi`` holds the central
    frequency vector of each wavelet, shape (J, L, 2), and ``gains`` the
    per-scale normalisation applied to the raw Morlet wavelets.
    """

    height: int
    width: int
    params: BankParams
    psi_hat: np.ndarray
    phi_hat: np.ndarray
    xi: np.ndarray
    gains: np.ndarray = field(default_factory=lambda: np.ones(0))

    @property
    def J(self) -> int:
        return self.params.J

    @property
    def L(self) -> int:
        return self.params.L

    @property
    def n_wavelets(self) -> int:
        return self.J * self.L

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def frequency_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Angular frequencies (radians/pixel) of the DFT bins, as (H, W) arrays."""
    wy = 2 * np.pi * np.fft.fftfreq(height)
    wx = 2 * np.pi * np.fft.fftfreq(width)
    return np.meshgrid(wy, wx, indexing="ij")


def periodized_gaussian(wy, wx, sigma: float, xi: float, theta: float, slant: float) -> np.ndarray:
    """Fourier transform of a unit-mass anisotropic Gabor, periodised over 2*pi.

    The spatial envelope has standard deviation ``sigma`` along ``theta`` and
    ``sigma / slant`` across it; the carrier sits at ``xi`` along ``theta``.
    """
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(np.shape(wy))
    for my in _ALIASES:
        for mx in _ALIASES:
            uy = wy + 2 * np.pi * my
            ux = wx + 2 * np.pi * mx
            along = uy * c + ux * s - xi
            across = -uy * s + ux * c
            out += np.exp(-0.5 * (sigma ** 2 * along ** 2 + (sigma / slant) ** 2 * across ** 2))
    return out


def morlet_hat(wy, wx, sigma: float, xi: float, theta: float, slant: float) -> np.ndarray:
    """Gabor minus the Gaussian multiple that cancels its value at zero frequency."""
    gabor = periodized_gaussian(wy, wx, sigma, xi, theta, slant)
    envelope = periodized_gaussian(wy, wx, sigma, 0.0, theta, slant)
    beta = gabor[0, 0] / envelope[0, 0]
    out = gabor - beta * envelope
    out[0, 0] = 0.0
    return out


def _mirror(a: np.ndarray) -> np.ndarray:
    """a(-omega) on the DFT grid."""
    h, w = a.shape[-2:]
    return a[..., (-np.arange(h)) % h, :][..., (-np.arange(w)) % w]


def _scale_energy(psi_hat: np.ndarray) -> np.ndarray:
    """Orientation-summed symmetric energy per scale, shape (J, H, W)."""
    return 0.5 * np.sum(psi_hat ** 2 + _mirror(psi_hat) ** 2, axis=1)


def nyquist_region(height: int, width: int) -> np.ndarray:
    """Frequencies with radial magnitude at most pi."""
    wy, wx = frequency_grid(height, width)
    return np.hypot(wy, wx) <= np.pi


def _minimax_gains(phi2: np.ndarray, energy: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Per-scale squared-gain weights minimising max |LP - 1| over ``region``.

    A small linear program in (w_0..w_{J-1}, e): minimise e subject to
    |phi2 + sum_j w_j E_j - 1| <= e. Returns the amplitude gains sqrt(w_j).
    """
    a = energy[:, region].T
    p = phi2[region]
    n = a.shape[1]
    ones = np.ones((len(p), 1))
    a_ub = np.vstack([np.hstack([a, -ones]), np.hstack([-a, -ones])])
    b_ub = np.concatenate([1.0 - p, p - 1.0])
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=[(0, None)] * (n + 1), method="highs")
    if not res.success:
        return np.ones(n)
    return np.sqrt(res.x[:n])


def build_bank(height: int, width: int, params: BankParams | None = None) -> FilterBank:
    """Build the Morlet bank for an ``height`` x ``width`` raster.

    Scale ``j`` uses envelope width ``sigma0 * 2**j`` and carrier
    ``xi0 / 2**j``; the low-pass is an isotropic Gaussian of width
    ``sigma0 * 2**J`` normalised to unit DC gain. With ``params.normalize``
    each scale's wavelets are multiplied by a common gain chosen so the
    Littlewood-Paley sum stays as close to 1 as possible inside the Nyquist
    disk.
    """
    params = params or BankParams()
    min_extent = 4 * 2 ** params.J
    if height < min_extent or width < min_extent:
        raise DataError(f"raster {height}x{width} too small for J={params.J}; "
                        f"both extents must be >= {min_extent}")
    wy, wx = frequency_grid(height, width)
    slant = params.slant_value
    psi = np.empty((params.J, params.L, height, width))
    xi = np.empty((params.J, params.L, 2))
    for j in range(params.J):
        sigma = params.sigma0 * 2 ** j
        xi_j = params.xi0 / 2 ** j
        for r, theta in enumerate(params.angles()):
            psi[j, r] = morlet_hat(wy, wx, sigma, xi_j, theta, slant)
            xi[j, r] = (xi_j * np.cos(theta), xi_j * np.sin(theta))

    phi = periodized_gaussian(wy, wx, params.sigma0 * 2 ** params.J, 0.0, 0.0, 1.0)
    phi /= phi[0, 0]

    if params.normalize:
        gains = _minimax_gains(phi ** 2, _scale_energy(psi), nyquist_region(height, width))
        psi *= gains[:, None, None, None]
    else:
        gains = np.ones(params.J)

    for a in (psi, phi, xi, gains):
        a.setflags(write=False)
    return FilterBank(height, width, params, psi, phi, xi, gains)


def littlewood_paley(bank: FilterBank) -> np.ndarray:
    """|phi_hat|^2 + 1/2 sum_{j,r} (|psi_hat(w)|^2 + |psi_hat(-w)|^2)."""
    lp = bank.phi_hat ** 2
    if bank.psi_hat.size:
        lp = lp + _scale_energy(bank.psi_hat).sum(axis=0)
    return lp


def lp_deviation(bank: FilterBank) -> float:
    """max |LP - 1| over the Nyquist disk."""
    lp = littlewood_paley(bank)[nyquist_region(bank.height, bank.width)]
    return float(np.max(np.abs(lp - 1.0)))


def spatial_filters(bank: FilterBank) -> tuple[np.ndarray, np.ndarray]:
    """Centred spatial-domain filters: (J, L, H, W) complex wavelets and (H, W) low-pass."""
    psi = np.fft.fftshift(np.fft.ifft2(bank.psi_hat), axes=(-2, -1))
    phi = np.fft.fftshift(np.fft.ifft2(bank.phi_hat).real)
    return psi, phi
