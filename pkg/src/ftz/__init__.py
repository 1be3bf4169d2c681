"""Composed frozen vision towers (anchor + augmenting encoder fused by cross-attention) in a toy multimodal LM."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
