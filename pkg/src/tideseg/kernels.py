"""Backend selection for the convolution hot kernels.

At import we prefer the compiled Cython extension and fall back to the pure
NumPy implementation.  ``TIDESEG_KERNELS=fallback`` forces the NumPy path,
``TIDESEG_KERNELS=compiled`` makes a missing extension a hard error (useful
in benchmarks so a silent fallback cannot skew numbers).
"""
from __future__ import annotations

import os

from . import _kernels_np

_choice = os.environ.get("TIDESEG_KERNELS", "").strip().lower()

if _choice == "fallback":
    im2col = _kernels_np.im2col
    col2im = _kernels_np.col2im
    BACKEND = "fallback"
else:
    try:
        from . import _convkernels

        im2col = _convkernels.im2col
        col2im = _convkernels.col2im
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        im2col = _kernels_np.im2col
        col2im = _kernels_np.col2im
        BACKEND = "fallback"

__all__ = ["im2col", "col2im", "BACKEND"]
