"""Pure-numpy convolution kernels (fallback backend).

Accumulation per output element runs over kernel taps then in-group
channel in ascending (ki, kj, ic) order, the same order as the jitted
backend and the naive five-loop reference, so float results agree
bitwise between backends.
"""

from __future__ import annotations

import numpy as np


def _out_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _tap_view(xp, ki, kj, oh, ow, stride, dilation):
    i0 = ki * dilation
    j0 = kj * dilation
    return xp[:, i0 : i0 + (oh - 1) * stride + 1 : stride, j0 : j0 + (ow - 1) * stride + 1 : stride, :]


def conv2d_forward(x, w, stride, padding, dilation, groups):
    """Grouped 2D convolution, NHWC input, (kh, kw, cin/groups, cout) weight."""
    n, h, wd, cin = x.shape
    kh, kw, icg, cout = w.shape
    ocg = cout // groups
    oh = _out_extent(h, kh, stride, padding, dilation)
    ow = _out_extent(wd, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    wg = w.reshape(kh, kw, icg, groups, ocg)
    out = np.zeros((n, oh, ow, groups, ocg), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = _tap_view(xp, ki, kj, oh, ow, stride, dilation)
            xg = xs.reshape(n, oh, ow, groups, icg)
            for ic in range(icg):
                out += xg[..., ic, None] * wg[ki, kj, ic]
    return out.reshape(n, oh, ow, cout)


def conv2d_backward_input(gout, w, x_shape, stride, padding, dilation, groups):
    n, h, wd, cin = x_shape
    kh, kw, icg, cout = w.shape
    ocg = cout // groups
    _, oh, ow, _ = gout.shape
    wg = w.reshape(kh, kw, icg, groups, ocg)
    gg = gout.reshape(n, oh, ow, groups, ocg)
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin), dtype=gout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.einsum("nxygo,igo->nxygi", gg, wg[ki, kj])
            _tap_view(dxp, ki, kj, oh, ow, stride, dilation)[...] += contrib.reshape(
                n, oh, ow, cin
            )
    if padding:
        return dxp[:, padding:-padding, padding:-padding, :]
    return dxp


def conv2d_backward_weight(gout, x, w_shape, stride, padding, dilation, groups):
    kh, kw, icg, cout = w_shape
    ocg = cout // groups
    n, oh, ow, _ = gout.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    gg = gout.reshape(n, oh, ow, groups, ocg)
    dw = np.zeros((kh, kw, icg, groups, ocg), dtype=gout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xs = _tap_view(xp, ki, kj, oh, ow, stride, dilation)
            xg = xs.reshape(n, oh, ow, groups, icg)
            dw[ki, kj] = np.einsum("nxygi,nxygo->igo", xg, gg)
    return dw.reshape(w_shape)
