# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels.

Layout contract is shared with the NumPy fallback in ``_kernels_np``:
``col[b, (c*kh + i)*kw + j, oy*ow + ox] = x[b, c, oy*s + i - pad, ox*s + j - pad]``
(zero outside the input).  Keeping the layout identical makes the surrounding
GEMM, and therefore forward results, backend independent.
"""
import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(x, int kh, int kw, int stride, int pad):
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {x.dtype}")
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(col, x_shape, int kh, int kw, int stride, int pad):
    if col.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {col.dtype}")
    return _col2im(np.ascontiguousarray(col), tuple(x_shape), kh, kw, stride, pad)


def _im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_np = np.zeros((b, c * kh * kw, oh * ow),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] out = out_np
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    out[bi, row, oy * ow + ox] = x[bi, ci, iy, ix]
    return out_np


def _col2im(real[:, :, ::1] col, x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_np = np.zeros((b, c, h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] out = out_np
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ci * kh + i) * kw + j
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    out[bi, ci, iy, ix] += col[bi, row, oy * ow + ox]
    return out_np
