"""Exact positive-pair kernels and contrastive kernel learning on finite tasks."""

__version__ = "0.1.0"
