"""Text-aware single-image specular highlight removal."""

__version__ = "0.1.0"
