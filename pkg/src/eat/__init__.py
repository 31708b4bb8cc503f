"""Adaptive transformer encoder with token pruning, windowed attention and early exits."""

__version__ = "0.1.0"
