"""Convolutional spiking network pipeline with domain-level learned kernels."""

__version__ = "0.1.0"
