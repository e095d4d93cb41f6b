"""Clustering-based learned image codec with guided post-quantization filtering."""

__version__ = "0.1.0"
