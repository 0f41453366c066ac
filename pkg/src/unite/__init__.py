"""Uncertainty-aware health risk prediction with a multimodal deep-kernel sparse GP."""

__version__ = "0.1.0"
