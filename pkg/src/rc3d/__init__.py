"""Residual 3-D convolutional video classifiers with generated depth and motion streams,
built on a small numpy autograd engine."""

from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["Tensor", "Parameter", "backward", "no_grad"]
__version__ = "0.1.0"
