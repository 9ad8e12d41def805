"""Event + frame video frame interpolation on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
