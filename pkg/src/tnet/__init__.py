"""Traversal networks: multi-scale hard attention over image scale-space.

A numpy implementation of a network that processes an image coarse to fine,
choosing with a learned policy which grid cells to revisit at higher
resolution, trained with a REINFORCE-style rule. Includes a small autodiff
engine, the network modules, a FLOPs/parameter profiler, a synthetic glyph
dataset and a command-line driver.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    GeometryError,
    NumericDomainError,
    ShapeError,
    TNetError,
)
from .tensor import Tensor, no_grad

__all__ = [
    "BACKEND",
    "Tensor",
    "no_grad",
    "TNetError",
    "ShapeError",
    "NumericDomainError",
    "ContractError",
    "GeometryError",
    "ConfigurationError",
    "FormatError",
]
