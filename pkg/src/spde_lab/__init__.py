"""Spectral-Galerkin laboratory for dissipative stochastic reaction-diffusion equations."""

__version__ = "0.1.0"
