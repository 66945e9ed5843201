"""Reverse-mode automatic differentiation with differentiable gradients."""

from .core import (
    DomainError,
    Node,
    NonFiniteError,
    ShapeError,
    as_node,
    grad,
    grad_mode,
    is_grad_enabled,
    no_grad,
    tensor,
)
from .io import FormatError, load_tensor, read_tensor, save_tensor, write_tensor
from .ops import (
    absolute,
    add,
    broadcast_to,
    clip,
    col2im,
    conv2d,
    div,
    elementwise,
    exp,
    im2col,
    log,
    matmul,
    mean,
    mul,
    neg,
    reduce,
    reduce_max,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    square,
    sub,
    sum_to,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
