"""Hot convolution kernels with a compiled backend and a numpy fallback.

The compiled extension (``metatrack._ckernels``) is picked at import when it
was built; otherwise the numpy implementation in ``metatrack._pykernels`` is
used. Both produce identical results, so the choice never changes numerics.
"""

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use_backend(name):
    """Switch the active backend; returns the previous name."""
    global BACKEND, _impl
    if name == "cython" and _ckernels is None:
        raise RuntimeError("compiled kernels are not built; run `python setup.py build_ext --inplace`")
    if name not in ("python", "cython"):
        raise ValueError(f"unknown kernel backend {name!r}")
    previous = BACKEND
    BACKEND = name
    _impl = _ckernels if name == "cython" else _pykernels
    return previous


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` of shape [C, N, H, W] into columns [C*kh*kw, N*Ho*Wo]."""
    x = np.ascontiguousarray(x)
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    C, N, H, W = shape
    cols = np.ascontiguousarray(cols)
    return _impl.col2im(cols, C, N, H, W, kh, kw, stride, pad)
