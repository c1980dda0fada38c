"""Skeleton-agnostic autoregressive motion diffusion."""

__version__ = "0.1.0"
