"""Attention-guided domain-adversarial alignment for single-stage detectors."""

__version__ = "0.1.0"
