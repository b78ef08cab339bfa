"""Typical-to-atypical voice conversion for dysarthric speech data augmentation."""

__version__ = "0.1.0"
