"""Desk-scale lab for post-training quantization under input degradations."""

__version__ = "0.1.0"
