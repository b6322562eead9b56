"""Ensemble soft actor-critic with periodic intra-ensemble knowledge distillation."""

from .kernels import USE_NUMBA

__version__ = "0.1.0"
