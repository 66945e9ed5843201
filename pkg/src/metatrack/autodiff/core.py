"""Graph nodes and the reverse-mode sweep.

Every backward rule in :mod:`metatrack.autodiff.ops` is written with the same
differentiable operations as the forward pass, so the gradients returned by
:func:`grad` with ``create_graph=True`` can be differentiated again.
"""

import contextlib
import threading

import numpy as np

_mode = threading.local()


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DomainError(ValueError):
    """An operation was applied outside its mathematical domain."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def is_grad_enabled():
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def grad_mode(enabled):
    previous = is_grad_enabled()
    _mode.enabled = enabled
    try:
        yield
    finally:
        _mode.enabled = previous


def no_grad():
    """Context in which new nodes record no parents (constants)."""
    return grad_mode(False)


class Node:
    """A value in the computational graph.

    ``value`` is a read-only numpy array. Nodes built while grad mode is off,
    or from inputs that do not require grad, are constants with no parents.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "vjp", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, parents=(), op="leaf", vjp=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.op = op
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value.reshape(-1)[0])

    def detach(self):
        return Node(self.value, op="detach")

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Node(op={self.op}, shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the functions live in ops to keep one definition each
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _freeze(value):
    value.setflags(write=False)
    return value


def tensor(data, dtype=np.float64, requires_grad=False):
    """Create a leaf node holding a copy of ``data``."""
    value = np.array(data, dtype=dtype, copy=True)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("tensor: input contains NaN or Inf")
    return Node(_freeze(value), op="leaf", requires_grad=requires_grad)


def as_node(x, dtype=None):
    if isinstance(x, Node):
        return x
    value = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    if not value.flags.writeable and value.flags.c_contiguous:
        return Node(value, op="const")
    return Node(_freeze(np.array(value)), op="const")


def make_node(value, op, parents, vjp):
    """Wrap a freshly computed ``value``; enforces the NaN/Inf policy."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced NaN or Inf")
    value = _freeze(value)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), op, vjp, True)
    return Node(value, op=op)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt, create_graph=False):
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the results are themselves differentiable.
    Otherwise they are constants, which is the first-order approximation
    used by the meta-learner. A ``wrt`` node that ``output`` does not depend
    on gets a zero gradient of matching shape.
    """
    from . import ops

    if output.size != 1:
        raise ShapeError(f"grad: output must have exactly one element, got shape {output.shape}")
    wrt = list(wrt)
    for i, w in enumerate(wrt):
        if not w.requires_grad:
            raise ValueError(f"grad: wrt[{i}] ({w.op}, shape {w.shape}) does not require grad")
    keep = {id(w) for w in wrt}
    grads = {}
    with grad_mode(create_graph):
        if output.requires_grad:
            order = _topological_order(output)
            grads[id(output)] = as_node(np.ones(output.shape, dtype=output.dtype))
            for node in reversed(order):
                g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else ops.add(prev, pg)
        out = []
        for w in wrt:
            g = grads.get(id(w))
            if g is None:
                g = as_node(np.zeros(w.shape, dtype=w.dtype))
            elif not create_graph and g.requires_grad:
                g = g.detach()
            out.append(g)
    return out
