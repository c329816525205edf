"""Highly-available, dynamically-scalable vehicular PKI (LTCA, PCA, RA)."""

__version__ = "0.1.0"
