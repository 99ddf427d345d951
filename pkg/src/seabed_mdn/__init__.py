"""Probabilistic seabed shear-velocity inversion with a mixture density network."""

__version__ = "0.1.0"
