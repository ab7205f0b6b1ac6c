"""Sparse prototype classification heads (SIDE) and the InfoDisent baseline."""

__version__ = "0.1.0"
