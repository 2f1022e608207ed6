"""Synthetic detection/segmentation datasets from generated foregrounds and backgrounds."""

__version__ = "0.1.0"
