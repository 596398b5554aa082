"""Plane-query learning for two-view planar reconstruction and relative pose, in numpy."""

__version__ = "0.1.0"
