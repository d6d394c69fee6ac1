"""Rough-path calculus and semilinear rough PDEs on a truncated Fourier space."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
