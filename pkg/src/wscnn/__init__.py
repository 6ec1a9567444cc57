"""Wavelet-scattering motion compensation for multi-trigger-delay cardiac DTI."""

__version__ = "0.1.0"
