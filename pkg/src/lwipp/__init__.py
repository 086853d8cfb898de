"""Likelihood-weighted informative path planning for anomalous environments."""

__version__ = "0.1.0"
