"""Depth compression of residual MLPs with sliced optimal-transport regularization."""

__version__ = "0.1.0"
