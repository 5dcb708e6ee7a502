"""Toy-scale diffusion engine for checking step-plan, attention and sampler mechanisms."""

__version__ = "0.1.0"
