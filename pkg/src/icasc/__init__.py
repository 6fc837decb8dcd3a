"""Attention-separability training engine (ICASC).

Channel-weighted gradient attention, attention separation and cross-layer
consistency losses, a small from-scratch autodiff engine that supports
double backpropagation, and a desk-scale CNN training/evaluation harness.
"""

from .autodiff import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "__version__"]
