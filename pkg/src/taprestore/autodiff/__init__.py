"""Minimal float64 tensor engine with reverse-mode differentiation."""

from . import ops
from .gradcheck import finite_difference_grad, gradcheck, max_relative_error
from .tensor import (
    AutodiffError,
    NonFiniteError,
    TapeNode,
    Tensor,
    check_finite_enabled,
    finite_checks,
    is_grad_enabled,
    no_grad,
    set_check_finite,
    tensor,
)

__all__ = [
    "ops",
    "Tensor",
    "TapeNode",
    "AutodiffError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "set_check_finite",
    "check_finite_enabled",
    "finite_checks",
    "gradcheck",
    "finite_difference_grad",
    "max_relative_error",
]
