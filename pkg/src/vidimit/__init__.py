"""Imitation from a single demonstration video with human similarity ratings."""

__version__ = "0.1.0"
