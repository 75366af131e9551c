"""Variational partial-regularity diagnostics for quadratic optimal transport."""

__version__ = "0.1.0"
