"""Stochastic 2D Navier-Stokes on the torus with small spatially correlated noise."""

__version__ = "0.1.0"
