"""Conditional variational capsule networks for open set recognition."""

__version__ = "0.1.0"
