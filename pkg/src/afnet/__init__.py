"""Attention-fused segmentation network, tiling pipeline, and evaluation tools."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, finite_difference_gradient, no_grad  # noqa: F401
from .layers import ParamStore  # noqa: F401
