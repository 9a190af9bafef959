"""Transformer-based multimodal fusion for AU detection and expression recognition."""

__version__ = "0.1.0"
