"""Diffusion samplers with learnable Gaussian-mixture priors."""

from ._runtime import tune_allocator

tune_allocator()

__version__ = "0.1.0"
