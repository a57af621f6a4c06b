"""Distributionally robust adaptive recoding for batched network coding."""

__version__ = "0.1.0"
