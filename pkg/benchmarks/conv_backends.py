"""Compare the numba and numpy convolution backends.

Runs the forward and both backward kernels on a few representative shapes
and prints a table of best-of-N wall times plus the speedup. The numba
backend is also checked for bitwise agreement with the numpy one on each
case (both accumulate in the same tap order, so results must be
identical, not merely close).

Usage: python benchmarks/conv_backends.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tdae.engine import kernels_numpy
from tdae.engine.backend import NUMBA_AVAILABLE
from tdae.engine.conv import Conv2dSpec

CASES = [
    ("patch_embed 64x64", (2, 64, 64), Conv2dSpec(1, 16, (7, 7), stride=2, padding=3)),
    ("depthwise 5x5 d2", (2, 32, 32), Conv2dSpec(32, 32, (5, 5), padding=4, dilation=2, groups=32)),
    ("pointwise 1x1", (2, 32, 32), Conv2dSpec(64, 64, (1, 1))),
    ("dense 3x3", (2, 28, 28), Conv2dSpec(32, 32, (3, 3), padding=1)),
]


def _best_of(fn, repeats: int) -> float:
    fn()  # warm-up: first numba call compiles
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeats: int) -> None:
    if not NUMBA_AVAILABLE:
        print("numba is not installed; nothing to compare")
        return
    from tdae.engine import kernels_numba

    rng = np.random.default_rng(0)
    header = f"{'case':<20} {'kernel':<16} {'numpy_ms':>9} {'numba_ms':>9} {'speedup':>8}  bitwise"
    print(header)
    print("-" * len(header))
    for name, (n, h, w_px), spec in CASES:
        xshape = (n, h, w_px, spec.in_channels)
        x = rng.normal(size=xshape)
        w = rng.normal(size=spec.weight_shape)
        oh = spec.out_extent(h, spec.kernel_size[0])
        ow = spec.out_extent(w_px, spec.kernel_size[1])
        g = rng.normal(size=(n, oh, ow, spec.out_channels))
        conv_args = (spec.stride, spec.padding, spec.dilation, spec.groups)
        pairs = [
            ("forward",
             lambda k=kernels_numpy: k.conv2d_forward(x, w, *conv_args),
             lambda k=kernels_numba: k.conv2d_forward(x, w, *conv_args)),
            ("backward_input",
             lambda k=kernels_numpy: k.conv2d_backward_input(g, w, xshape, *conv_args),
             lambda k=kernels_numba: k.conv2d_backward_input(g, w, xshape, *conv_args)),
            ("backward_weight",
             lambda k=kernels_numpy: k.conv2d_backward_weight(g, x, w.shape, *conv_args),
             lambda k=kernels_numba: k.conv2d_backward_weight(g, x, w.shape, *conv_args)),
        ]
        for kind, f_np, f_nb in pairs:
            t_np = _best_of(f_np, repeats)
            t_nb = _best_of(f_nb, repeats)
            exact = bool(np.array_equal(f_np(), f_nb()))
            print(
                f"{name:<20} {kind:<16} {t_np * 1e3:>9.2f} {t_nb * 1e3:>9.2f} "
                f"{t_np / t_nb:>7.1f}x  {exact}"
            )


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    run(ap.parse_args().repeats)
