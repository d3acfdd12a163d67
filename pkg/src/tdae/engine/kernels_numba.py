"""Numba-jitted convolution kernels (default backend).

These are the hot inner loops of the whole package: the strided patch
embedding plus the depthwise, dilated, and pointwise convolutions of the
skip attention module all funnel through here.

Accumulation-order contract, shared with the numpy fallback: the forward
pass sums each output element over taps in ascending (ki, kj, ic) order,
and the weight gradient sums each filter element over positions in
ascending (n, oi, oj) order, so those two are bitwise identical across
backends. The input gradient reduces over output channels, which the
numpy fallback does through einsum's vectorized partial sums; no scalar
loop can match that rounding pattern, so backends agree there only to
~1e-12 relative.

fastmath stays off: reassociation would break the order contract. The
innermost channel loops are still SIMD-friendly because they are pure
elementwise updates, not reductions.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def conv2d_forward(x, w, stride, padding, dilation, groups):
    """Grouped 2D convolution.

    Parameters
    ----------
    x : ndarray, shape (n, h, w, cin)
        Input in NHWC layout.
    w : ndarray, shape (kh, kw, cin // groups, cout)
        Filter bank; output channels are ordered group-major.
    stride, padding, dilation, groups : int
        Single integer per knob, applied to both spatial axes.

    Returns
    -------
    ndarray, shape (n, oh, ow, cout)
    """
    n, h, wd, cin = x.shape
    kh, kw, icg, cout = w.shape
    ocg = cout // groups
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, oh, ow, cout), dtype=x.dtype)
    depthwise = icg == 1 and ocg == 1
    for ni in range(n):
        for oi in range(oh):
            ibase = oi * stride - padding
            for oj in range(ow):
                jbase = oj * stride - padding
                for ki in range(kh):
                    xi = ibase + ki * dilation
                    if xi < 0 or xi >= h:
                        continue
                    for kj in range(kw):
                        xj = jbase + kj * dilation
                        if xj < 0 or xj >= wd:
                            continue
                        if depthwise:
                            # per-channel filters: the channel axis is the
                            # contiguous elementwise loop
                            for c in range(cout):
                                out[ni, oi, oj, c] += x[ni, xi, xj, c] * w[ki, kj, 0, c]
                        else:
                            for gi in range(groups):
                                cbase = gi * icg
                                obase = gi * ocg
                                for ic in range(icg):
                                    xv = x[ni, xi, xj, cbase + ic]
                                    for oc in range(ocg):
                                        out[ni, oi, oj, obase + oc] += xv * w[ki, kj, ic, obase + oc]
    return out


@njit(cache=True, fastmath=False)
def conv2d_backward_input(gout, w, x_shape, stride, padding, dilation, groups):
    """Gradient of conv2d_forward with respect to the input."""
    n, h, wd, cin = x_shape
    kh, kw, icg, cout = w.shape
    ocg = cout // groups
    oh = gout.shape[1]
    ow = gout.shape[2]
    dx = np.zeros((n, h, wd, cin), dtype=gout.dtype)
    depthwise = icg == 1 and ocg == 1
    for ni in range(n):
        for oi in range(oh):
            ibase = oi * stride - padding
            for oj in range(ow):
                jbase = oj * stride - padding
                for ki in range(kh):
                    xi = ibase + ki * dilation
                    if xi < 0 or xi >= h:
                        continue
                    for kj in range(kw):
                        xj = jbase + kj * dilation
                        if xj < 0 or xj >= wd:
                            continue
                        if depthwise:
                            for c in range(cout):
                                dx[ni, xi, xj, c] += gout[ni, oi, oj, c] * w[ki, kj, 0, c]
                        else:
                            for gi in range(groups):
                                cbase = gi * icg
                                obase = gi * ocg
                                for ic in range(icg):
                                    acc = 0.0
                                    for oc in range(ocg):
                                        acc += gout[ni, oi, oj, obase + oc] * w[ki, kj, ic, obase + oc]
                                    dx[ni, xi, xj, cbase + ic] += acc
    return dx


@njit(cache=True, fastmath=False)
def conv2d_backward_weight(gout, x, w_shape, stride, padding, dilation, groups):
    """Gradient of conv2d_forward with respect to the filter bank."""
    kh, kw, icg, cout = w_shape
    n, h, wd, cin = x.shape
    ocg = cout // groups
    oh = gout.shape[1]
    ow = gout.shape[2]
    dw = np.zeros((kh, kw, icg, cout), dtype=gout.dtype)
    depthwise = icg == 1 and ocg == 1
    for ni in range(n):
        for oi in range(oh):
            ibase = oi * stride - padding
            for oj in range(ow):
                jbase = oj * stride - padding
                for ki in range(kh):
                    xi = ibase + ki * dilation
                    if xi < 0 or xi >= h:
                        continue
                    for kj in range(kw):
                        xj = jbase + kj * dilation
                        if xj < 0 or xj >= wd:
                            continue
                        if depthwise:
                            for c in range(cout):
                                dw[ki, kj, 0, c] += x[ni, xi, xj, c] * gout[ni, oi, oj, c]
                        else:
                            for gi in range(groups):
                                cbase = gi * icg
                                obase = gi * ocg
                                for ic in range(icg):
                                    xv = x[ni, xi, xj, cbase + ic]
                                    for oc in range(ocg):
                                        dw[ki, kj, ic, obase + oc] += xv * gout[ni, oi, oj, obase + oc]
    return dw
