"""Convolution isogeometric analysis on multi-patch NURBS geometries."""

__version__ = "0.1.0"
