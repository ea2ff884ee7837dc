"""Monocular 3-D multi-object tracking with selective state-space models."""

__version__ = "0.1.0"
