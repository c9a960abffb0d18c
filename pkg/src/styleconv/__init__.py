"""Adversarial conversion between segmentation annotation styles."""

__version__ = "0.1.0"
