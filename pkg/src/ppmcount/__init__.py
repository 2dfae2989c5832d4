"""Confidence-map object counting and localization."""

__version__ = "0.1.0"
