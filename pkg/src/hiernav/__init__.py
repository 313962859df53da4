"""Hierarchical multi-vehicle navigation testbed."""

__version__ = "0.1.0"
