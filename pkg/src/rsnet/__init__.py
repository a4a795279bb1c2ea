"""Single-shot object detection from scratch on numpy."""

__version__ = "0.1.0"
