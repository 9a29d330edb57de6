"""Compact nuclei centroid maps (CellOMaps) for growth-pattern classification."""

__version__ = "0.1.0"
