"""Relational convolutional networks on a small numpy autograd core."""

from .tensor import Tensor, ShapeError, no_grad
from .relation import MDIPR
from .convolution import GraphletFilters, RelConv, enumerate_groups, relconv_discrete
from .grouping import GroupAttention, SoftGroupRelConv, entropy_regularizer
from .models import ModelSpec, RelConvBlockConfig, build_model

__all__ = [
    "Tensor", "ShapeError", "no_grad", "MDIPR", "GraphletFilters", "RelConv",
    "enumerate_groups", "relconv_discrete", "GroupAttention", "SoftGroupRelConv",
    "entropy_regularizer", "ModelSpec", "RelConvBlockConfig", "build_model",
]
