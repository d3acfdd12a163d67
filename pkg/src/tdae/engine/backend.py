"""Convolution backend selection.

``TDAE_BACKEND=numba`` (default when numba imports) routes conv kernels
through the jitted loops; ``TDAE_BACKEND=numpy`` forces the pure-numpy
fallback. Forward and weight-gradient results are bitwise identical
across backends (shared accumulation order); the input gradient agrees
to ~1e-12 relative because the fallback reduces over output channels
with vectorized partial sums.
"""

from __future__ import annotations

import os

from ..errors import ConfigurationError
from . import kernels_numpy

try:
    from . import kernels_numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    kernels_numba = None
    NUMBA_AVAILABLE = False

_impl = None
_name = None


def _resolve():
    global _impl, _name
    if _impl is not None:
        return _impl
    choice = os.environ.get("TDAE_BACKEND", "").strip().lower()
    if choice in ("", "auto"):
        choice = "numba" if NUMBA_AVAILABLE else "numpy"
    if choice == "numba":
        if not NUMBA_AVAILABLE:
            raise ConfigurationError("TDAE_BACKEND=numba but numba is not importable")
        _impl, _name = kernels_numba, "numba"
    elif choice == "numpy":
        _impl, _name = kernels_numpy, "numpy"
    else:
        raise ConfigurationError(f"unknown TDAE_BACKEND value {choice!r}")
    return _impl


def backend_name() -> str:
    _resolve()
    return _name


def conv_forward(x, w, stride, padding, dilation, groups):
    return _resolve().conv2d_forward(x, w, stride, padding, dilation, groups)


def conv_backward_input(gout, w, x_shape, stride, padding, dilation, groups):
    return _resolve().conv2d_backward_input(gout, w, x_shape, stride, padding, dilation, groups)


def conv_backward_weight(gout, x, w_shape, stride, padding, dilation, groups):
    return _resolve().conv2d_backward_weight(gout, x, w_shape, stride, padding, dilation, groups)
