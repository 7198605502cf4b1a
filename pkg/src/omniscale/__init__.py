"""Omni-scale 1D-CNN toolkit for time series classification."""

__version__ = "0.1.0"
