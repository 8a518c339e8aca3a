"""Sharpness-aware geometric defense for robust OOD detection."""

__version__ = "0.1.0"
