"""Slice-wise volumetric cell segmentation with context-aware pseudocoloring."""

__version__ = "0.1.0"
