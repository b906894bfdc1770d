"""Spectral Galerkin laboratory for wave equations with nonlocal weak damping."""

__version__ = "0.1.0"
