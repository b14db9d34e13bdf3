"""Desk-scale training-free architecture scoring lab."""

__version__ = "0.1.0"
