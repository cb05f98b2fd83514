"""Benchmark the compiled convolution kernels against the NumPy fallback.

The two backends share one column layout, so this times the exact work the
network does (im2col before the GEMM, col2im on the backward pass) on shapes
drawn from the default configuration.  Run:

    python benchmarks/bench_kernels.py [--repeats 30]

The script imports each backend module directly ("compiled" requires the
built extension and fails loudly rather than silently falling back), checks
the outputs agree bit-for-bit on every shape, and prints a table of median
wall times plus the speedup ratio.
"""
import argparse
import statistics
import time

import numpy as np

from tideseg import _kernels_np

try:
    from tideseg import _convkernels
except ImportError:
    _convkernels = None

# (label, batch, channels, height, width, kh, kw, stride, pad) — the encoder,
# temporal-aggregation, and decoder shapes of the default 48x80 configuration
SHAPES = [
    ("encoder stage 1 ", 4, 3, 48, 80, 3, 3, 2, 1),
    ("encoder stage 2 ", 4, 12, 24, 40, 3, 3, 2, 1),
    ("encoder stage 3 ", 4, 16, 12, 20, 3, 3, 2, 1),
    ("temporal 3d-conv", 4, 72, 6, 10, 3, 3, 1, 1),
    ("decoder fuse    ", 4, 24, 6, 10, 3, 3, 1, 1),
    ("decoder stage   ", 4, 40, 12, 20, 3, 3, 1, 1),
]


def bench(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=30, help="timed runs per case (median reported)")
    args = ap.parse_args()

    if _convkernels is None:
        raise SystemExit(
            "compiled extension not importable; build it first (pip install -e . "
            "--no-build-isolation) or there is nothing to compare"
        )

    rng = np.random.default_rng(0)
    print(f"{'case':<18} {'im2col np':>10} {'im2col cy':>10} {'ratio':>6}   "
          f"{'col2im np':>10} {'col2im cy':>10} {'ratio':>6}")
    for label, b, c, h, w, kh, kw, stride, pad in SHAPES:
        x = rng.standard_normal((b, c, h, w)).astype(np.float32)
        col_np = _kernels_np.im2col(x, kh, kw, stride, pad)
        col_cy = _convkernels.im2col(x, kh, kw, stride, pad)
        assert np.array_equal(col_np, col_cy), f"{label}: im2col outputs differ"
        back_np = _kernels_np.col2im(col_np, x.shape, kh, kw, stride, pad)
        back_cy = _convkernels.col2im(col_np, x.shape, kh, kw, stride, pad)
        assert np.array_equal(back_np, back_cy), f"{label}: col2im outputs differ"

        t_im_np = bench(lambda: _kernels_np.im2col(x, kh, kw, stride, pad), args.repeats)
        t_im_cy = bench(lambda: _convkernels.im2col(x, kh, kw, stride, pad), args.repeats)
        t_col_np = bench(lambda: _kernels_np.col2im(col_np, x.shape, kh, kw, stride, pad), args.repeats)
        t_col_cy = bench(lambda: _convkernels.col2im(col_np, x.shape, kh, kw, stride, pad), args.repeats)
        print(
            f"{label:<18} {t_im_np * 1e6:>8.1f}us {t_im_cy * 1e6:>8.1f}us "
            f"{t_im_np / t_im_cy:>5.2f}x   "
            f"{t_col_np * 1e6:>8.1f}us {t_col_cy * 1e6:>8.1f}us "
            f"{t_col_np / t_col_cy:>5.2f}x"
        )
    print("\nratios > 1 mean the compiled backend is faster; outputs verified equal.")


if __name__ == "__main__":
    main()
