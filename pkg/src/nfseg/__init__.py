"""Neurofibroma segmentation post-processing and evaluation."""

__version__ = "0.1.0"
