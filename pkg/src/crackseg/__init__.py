"""Crack patch detection and feature-pyramid crack segmentation toolkit."""

__version__ = "0.1.0"
