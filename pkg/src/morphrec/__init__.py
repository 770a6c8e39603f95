"""Desk-scale toolkit for regressing face-model coefficients from images."""

__version__ = "0.1.0"
