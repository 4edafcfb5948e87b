"""Correlation-function feature enhancement for a toy panoptic pipeline."""

__version__ = "0.1.0"
