"""Stain normalization with a tiny per-pixel color network and classic baselines."""

__version__ = "0.1.0"
