"""Differentiable curved-ray light transport and refractive-field reconstruction."""

__version__ = "0.1.0"
