"""Anisotropic fractional Schrodinger operators, exterior DtN maps and inverse recovery."""

__version__ = "0.1.0"
