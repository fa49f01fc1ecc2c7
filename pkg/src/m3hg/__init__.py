"""Multimodal emotion-cause triplet extraction over heterogeneous conversation graphs."""

__version__ = "0.1.0"
