"""Longitudinal multi-session subspace reconstruction of golden-angle radial dynamic MRI."""

__version__ = "0.1.0"
