"""Tangent and secant velocity models on synthetic low-dimensional data."""

__version__ = "0.1.0"
