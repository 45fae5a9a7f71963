"""Pseudo-spectral simulation and operator analysis for fractional stochastic
Navier-Stokes dynamics on the torus."""

__version__ = "0.1.0"
