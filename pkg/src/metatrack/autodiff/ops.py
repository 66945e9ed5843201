"""Differentiable operations.

Binary elementwise operations accept equal shapes or a single-element operand
(scalar broadcast). Richer broadcasting is explicit through
:func:`broadcast_to` and its adjoint :func:`sum_to`.
"""

import math
import weakref

import numpy as np

from .. import kernels
from .core import DomainError, Node, ShapeError, as_node, make_node


def _pair(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        raise TypeError("at least one operand must be a Node")
    dtype = a.dtype if isinstance(a, Node) else b.dtype
    a, b = as_node(a, dtype), as_node(b, dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"operand shapes {a.shape} and {b.shape} differ and neither is a scalar")
    return a, b



def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return reshape(reduce_sum(g), shape)


def _with_vjp(node, make_vjp):
    # vjps that need the output hold it weakly to avoid reference cycles
    if node.requires_grad:
        node.vjp = make_vjp(weakref.ref(node))
    return node


# -- binary elementwise ------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return make_node(a.value + b.value, "add", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return make_node(a.value - b.value, "sub", (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b):
    a, b = _pair(a, b)

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.value * b.value, "mul", (a, b), vjp)


def div(a, b):
    a, b = _pair(a, b)
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")

    def make_vjp(ref):
        def vjp(g):
            ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
            gb = _unbroadcast(neg(div(mul(g, ref()), b)), b.shape) if b.requires_grad else None
            return ga, gb
        return vjp

    return _with_vjp(make_node(a.value / b.value, "div", (a, b), None), make_vjp)


# -- unary elementwise -------------------------------------------------------

def neg(a):
    a = as_node(a)
    return make_node(-a.value, "neg", (a,), lambda g: (neg(g),))


def relu(a):
    mask = as_node((a.value > 0).astype(a.dtype))
    return make_node(np.maximum(a.value, 0), "relu", (a,), lambda g: (mul(g, mask),))


def exp(a):
    with np.errstate(over="ignore"):
        value = np.exp(a.value)
    return _with_vjp(make_node(value, "exp", (a,), None), lambda ref: lambda g: (mul(g, ref()),))


def log(a):
    if np.any(a.value < 0):
        raise DomainError("log: negative input")
    with np.errstate(divide="ignore"):
        value = np.log(a.value)
    return make_node(value, "log", (a,), lambda g: (div(g, a),))


def sqrt(a):
    if np.any(a.value < 0):
        raise DomainError("sqrt: negative input")
    return _with_vjp(make_node(np.sqrt(a.value), "sqrt", (a,), None),
                     lambda ref: lambda g: (div(mul(g, 0.5), ref()),))


def square(a):
    return make_node(a.value * a.value, "square", (a,), lambda g: (mul(g, mul(a, 2.0)),))


def _np_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    def make_vjp(ref):
        def vjp(g):
            out = ref()
            return (mul(g, mul(out, sub(1.0, out))),)
        return vjp

    return _with_vjp(make_node(_np_sigmoid(a.value), "sigmoid", (a,), None), make_vjp)


def softplus(a):
    """log(1 + exp(a)), computed without overflow."""
    x = a.value
    value = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_node(value.astype(x.dtype, copy=False), "softplus", (a,),
                     lambda g: (mul(g, sigmoid(a)),))


def absolute(a):
    sign = as_node(np.sign(a.value).astype(a.dtype))
    return make_node(np.abs(a.value), "abs", (a,), lambda g: (mul(g, sign),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    mask = as_node(((a.value >= lo) & (a.value <= hi)).astype(a.dtype))
    return make_node(np.clip(a.value, lo, hi), "clip", (a,), lambda g: (mul(g, mask),))


_UNARY = {
    "relu": relu, "exp": exp, "log": log, "sqrt": sqrt, "square": square,
    "sigmoid": sigmoid, "neg": neg, "abs": absolute, "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op, a, b=None):
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def reduce_sum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    if a.size == 0:
        raise ShapeError("sum: empty reduction")
    value = np.sum(a.value, axis=axes, keepdims=keepdims)
    kept = _kept_shape(a.shape, axes)
    return make_node(np.asarray(value), "sum", (a,),
                     lambda g: (broadcast_to(reshape(g, kept), a.shape),))


def mean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    if count == 0:
        raise ShapeError("mean: empty reduction")
    return mul(reduce_sum(a, axes, keepdims), 1.0 / count)


def reduce_max(a, axes=None, keepdims=False):
    """Maximum; the gradient goes to the first arg-max of each slice only."""
    axes = _norm_axes(axes, a.ndim)
    if a.size == 0:
        raise ShapeError("max: empty reduction")
    rest = tuple(i for i in range(a.ndim) if i not in axes)
    perm = rest + axes
    moved = np.transpose(a.value, perm)
    flat = moved.reshape(math.prod(moved.shape[: len(rest)]), -1)
    idx = np.argmax(flat, axis=1)
    onehot = np.zeros_like(flat)
    onehot[np.arange(flat.shape[0]), idx] = 1
    mask = as_node(np.transpose(onehot.reshape(moved.shape), np.argsort(perm)))
    value = np.max(a.value, axis=axes, keepdims=keepdims)
    kept = _kept_shape(a.shape, axes)
    return make_node(np.asarray(value), "max", (a,),
                     lambda g: (mul(broadcast_to(reshape(g, kept), a.shape), mask),))


def reduce(op, a, axes=None):
    """Dispatch a reduction by name; ``axes=None`` reduces everything."""
    fn = {"sum": reduce_sum, "mean": mean, "max": reduce_max}.get(op)
    if fn is None:
        raise ValueError(f"unknown reduction {op!r}")
    return fn(a, axes)


# -- shape manipulation ---------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return make_node(a.value.reshape(shape), "reshape", (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(np.ascontiguousarray(np.transpose(a.value, axes)), "transpose", (a,),
                     lambda g: (transpose(g, inverse),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} is not broadcastable to {shape}") from None
    return make_node(np.array(value), "broadcast", (a,), lambda g: (sum_to(g, a.shape),))


def sum_to(a, shape):
    """Sum ``a`` down to ``shape`` (the adjoint of :func:`broadcast_to`)."""
    shape = tuple(shape)
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: {a.shape} has lower rank than {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and a.shape[lead + i] != 1)
    value = np.sum(a.value, axis=axes, keepdims=True) if axes else a.value
    value = value.reshape(shape)
    return make_node(np.array(value), "sum_to", (a,), lambda g: (broadcast_to(g, a.shape),))


# -- linear algebra ----------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return make_node(a.value @ b.value, "matmul", (a, b), vjp)


def im2col(x, kh, kw, stride, pad):
    """Unfold a channel-major batch [C, N, H, W] into [C*kh*kw, N*Ho*Wo]."""
    shape = x.shape
    return make_node(kernels.im2col(x.value, kh, kw, stride, pad), "im2col", (x,),
                     lambda g: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(cols, shape, kh, kw, stride, pad):
    return make_node(kernels.col2im(cols.value, shape, kh, kw, stride, pad), "col2im", (cols,),
                     lambda g: (im2col(g, kh, kw, stride, pad),))


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation plus per-channel bias.

    ``x`` is [C_in, H, W] or a channel-major batch [C_in, N, H, W]; the output
    keeps the same layout with C_out channels.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [C_out, C_in, kh, kw], got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel height/width must be odd, got kh={kh}, kw={kw}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C, H, W] or [C, N, H, W], got {x.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has C_in={x.shape[0]} channels but kernel expects C_in={c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias must have shape ({c_out},) for C_out={c_out}, got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    batched = x.ndim == 4
    x4 = x if batched else reshape(x, (c_in, 1) + x.shape[1:])
    _, n, h, w = x4.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output size {ho}x{wo} is empty for input H={h}, W={w}, "
                         f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    cols = im2col(x4, kh, kw, stride, padding)
    out = matmul(reshape(kernel, (c_out, c_in * kh * kw)), cols)
    out = add(out, broadcast_to(reshape(bias, (c_out, 1)), out.shape))
    return reshape(out, (c_out, n, ho, wo) if batched else (c_out, ho, wo))
