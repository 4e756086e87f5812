"""Dense float64 autodiff, Adam, and the compiled/fallback hot kernels."""
from .adam import AdamState, adam_step
from .autodiff import (
    PRIMITIVES,
    NonFiniteError,
    Record,
    ShapeError,
    SparseConst,
    Tensor,
    UsageError,
    stable_sigmoid,
)
from .gradcheck import max_relative_error, numeric_grad
from .kernels import BACKEND

__all__ = [
    "AdamState",
    "BACKEND",
    "NonFiniteError",
    "PRIMITIVES",
    "Record",
    "ShapeError",
    "SparseConst",
    "Tensor",
    "UsageError",
    "adam_step",
    "max_relative_error",
    "numeric_grad",
    "stable_sigmoid",
]
