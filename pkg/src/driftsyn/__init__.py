"""Conditional drifting models for paired image-to-image synthesis."""

__version__ = "0.1.0"
