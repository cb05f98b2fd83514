"""Pure NumPy implementations of the convolution data-movement kernels.

These are the fallback used when the compiled extension is unavailable (or
when ``TIDESEG_KERNELS=fallback``).  Both backends must produce identical
column layouts: ``col[b, (c*kh + i)*kw + j, oy*ow + ox] = x[b, c, oy*s + i, ox*s + j]``
on the zero-padded input, so the GEMM that follows is backend independent.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (B, C, H, W) into (B, C*kh*kw, oh*ow) patch columns."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view.reshape(b, c * kh * kw, oh * ow))


def col2im(
    col: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Scatter-add patch columns back onto the input grid (adjoint of im2col)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    acc = np.zeros((b, c, hp, wp), dtype=col.dtype)
    colv = col.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += colv[
                :, :, i, j
            ]
    if pad > 0:
        return np.ascontiguousarray(acc[:, :, pad : pad + h, pad : pad + w])
    return acc
