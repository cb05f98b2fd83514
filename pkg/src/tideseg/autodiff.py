"""Minimal reverse-mode autodiff over NumPy arrays.

Only the operations the segmentation network and its losses need are
implemented.  Results are exact (no approximations), so analytic gradients
can be validated against central finite differences in the tests.

Graph recording is skipped entirely when no input requires gradients or
inside a ``no_grad()`` block, which keeps streaming inference free of tape
overhead.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (values are unaffected)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Constant view of this value; gradients do not flow past it."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff engine -------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node._parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        for node in topo:
            if node is not self:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


# -- reductions / reshaping -------------------------------------------------------
def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=a.data.dtype)
            full[idx] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


def stack(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, k, axis=axis))

    return _make(data, tuple(tensors), backward)


# -- structured ops ---------------------------------------------------------------
def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution (cross-correlation) over (B, C, H, W)."""
    x, w = as_tensor(x), as_tensor(w)
    bsz, c, h, wd = x.shape
    o, cin, kh, kw = w.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel expects {cin}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be empty for input {h}x{wd}, kernel {kh}x{kw}")

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        col = x.data.reshape(bsz, c, h * wd)
    else:
        col = kernels.im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2[None], col)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None]
    data = out.reshape(bsz, o, oh, ow)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(bsz, o, oh * ow))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 2)))
        if w.requires_grad:
            dw = np.einsum("bol,bkl->ok", g2, col, optimize=True)
            w._accumulate(dw.reshape(w.shape))
        if x.requires_grad:
            dcol = np.matmul(w2.T[None], g2)
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                x._accumulate(dcol.reshape(x.shape))
            else:
                x._accumulate(kernels.col2im(dcol, x.shape, kh, kw, stride, pad))

    return _make(data, parents, backward)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of (B, C, H, W) by an integer factor."""
    x = as_tensor(x)
    if factor == 1:
        return x
    b, c, h, w = x.shape
    data = np.broadcast_to(
        x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor)
    ).reshape(b, c, h * factor, w * factor)
    data = np.ascontiguousarray(data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


def box_sum3x3(x) -> Tensor:
    """Zero-padded 3x3 neighbourhood sum over (B, C, H, W); self-adjoint."""
    x = as_tensor(x)

    def run(arr):
        b, c, h, w = arr.shape
        padded = np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out = np.zeros_like(arr)
        for i in range(3):
            for j in range(3):
                out += padded[:, :, i : i + h, j : j + w]
        return out

    data = run(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(run(g))

    return _make(data, (x,), backward)


def cross_entropy_logits(scores, labels: np.ndarray, weights=None) -> Tensor:
    """Mean per-pixel cross-entropy of (B, K, H, W) logits against int labels.

    ``weights`` (length K, positive) rescales each pixel's term by the weight
    of its true class; the mean is taken over total weight so the loss scale
    stays comparable to the unweighted case.
    """
    scores = as_tensor(scores)
    b, k, h, w = scores.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"label shape {labels.shape} does not match scores {(b, h, w)}")
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    bi, yi, xi = np.ogrid[:b, :h, :w]
    picked = logp[bi, labels, yi, xi]
    if weights is None:
        pixel_w = None
        count = float(b * h * w)
        data = np.asarray(-picked.sum() / count, dtype=scores.dtype)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (k,):
            raise ValueError(f"need {k} class weights, got shape {weights.shape}")
        if not (weights > 0).all():
            raise ValueError("class weights must be positive")
        pixel_w = weights[labels]
        count = float(pixel_w.sum())
        data = np.asarray(-(picked * pixel_w).sum() / count, dtype=scores.dtype)

    def backward(g):
        if scores.requires_grad:
            grad = np.exp(logp)
            grad[bi, labels, yi, xi] -= 1.0
            if pixel_w is not None:
                grad *= pixel_w[:, None]
            scores._accumulate(grad * (float(g) / count))

    return _make(data, (scores,), backward)
