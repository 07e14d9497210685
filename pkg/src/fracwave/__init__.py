"""Simulation and inversion toolkit for semilinear fractional wave equations."""

__version__ = "0.1.0"
