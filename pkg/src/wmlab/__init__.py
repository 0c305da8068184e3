"""Desk-scale lab for training, attacking, and benchmarking invisible image watermarks."""

__version__ = "0.1.0"
