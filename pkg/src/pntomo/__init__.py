"""Proximal Newton solvers for TV-regularized Poisson CT reconstruction."""

__version__ = "0.1.0"
