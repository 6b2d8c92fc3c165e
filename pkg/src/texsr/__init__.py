"""Texture-aware super-resolution with hierarchical vector-quantized priors."""

__version__ = "0.1.0"
