"""Sparse-source recovery from ICA with isotropy-null calibrated thresholds."""

__version__ = "0.1.0"
