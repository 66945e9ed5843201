# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for channel-major batches ``[C, N, H, W]``.

Loop order in ``col2im`` matches the numpy fallback so both backends
accumulate in the same order and agree bit for bit.
"""

import numpy as np

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], N = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    if real is float:
        out_arr = np.zeros((C * kh * kw, N * Ho * Wo), dtype=np.float32)
    else:
        out_arr = np.zeros((C * kh * kw, N * Ho * Wo), dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, oy, ox, iy, ix, row, col
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for n in range(N):
                    for oy in range(Ho):
                        iy = oy * stride - pad + i
                        if iy < 0 or iy >= H:
                            continue
                        col = (n * Ho + oy) * Wo
                        for ox in range(Wo):
                            ix = ox * stride - pad + j
                            if 0 <= ix < W:
                                out[row, col + ox] = x[c, n, iy, ix]
    return out_arr


def col2im(const real[:, ::1] cols, int C, int N, int H, int W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    if real is float:
        out_arr = np.zeros((C, N, H, W), dtype=np.float32)
    else:
        out_arr = np.zeros((C, N, H, W), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, oy, ox, iy, ix, row, col
    for i in range(kh):
        for j in range(kw):
            for c in range(C):
                row = (c * kh + i) * kw + j
                for n in range(N):
                    for oy in range(Ho):
                        iy = oy * stride - pad + i
                        if iy < 0 or iy >= H:
                            continue
                        col = (n * Ho + oy) * Wo
                        for ox in range(Wo):
                            ix = ox * stride - pad + j
                            if 0 <= ix < W:
                                out[c, n, iy, ix] += cols[row, col + ox]
    return out_arr
