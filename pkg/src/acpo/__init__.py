"""Anchor-constrained quality fine-tuning of a toy diffusion model."""

__version__ = "0.1.0"
