"""Fusing interaction history and conversation attributes for conversational recommendation."""

__version__ = "0.1.0"
