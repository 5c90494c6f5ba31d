"""Outlier-aware spatio-temporal temperature interpolation."""

__version__ = "0.1.0"
