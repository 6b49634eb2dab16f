"""Disentangled text-to-image diffusion on a synthetic lesion domain."""

__version__ = "0.1.0"
