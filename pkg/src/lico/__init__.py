"""Desk-scale lab for language-image consistency training and saliency evaluation."""

from .tensor import GradientTape, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "GradientTape", "__version__"]
