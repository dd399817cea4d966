"""Extensible co-existing attention for few-shot detection, at desk scale."""

__version__ = "0.1.0"
