"""Modulated activation quantization for iterative diffusion samplers."""

__version__ = "0.1.0"
