"""Parallel multi-in-multi-out video prediction."""

__version__ = "0.1.0"
