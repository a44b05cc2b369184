"""Vanishing point detection on the Gaussian sphere."""

__version__ = "0.1.0"
