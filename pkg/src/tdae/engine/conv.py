"""The conv2d tape operation with its shape contract."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from . import backend
from .tensor import Tensor, VJP_RULES, _apply


@dataclass(frozen=True)
class Conv2dSpec:
    """Static description of one convolution: kernel, stride, pad, dilation, groups."""

    in_channels: int
    out_channels: int
    kernel_size: tuple[int, int]
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        kh, kw = self.kernel_size
        if kh < 1 or kw < 1:
            raise ConfigurationError(f"kernel_size must be positive, got {self.kernel_size}")
        if self.stride < 1 or self.dilation < 1:
            raise ConfigurationError(
                f"stride/dilation must be >= 1, got {self.stride}/{self.dilation}"
            )
        if self.padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel_size
        return (kh, kw, self.in_channels // self.groups, self.out_channels)

    def out_extent(self, size: int, axis_kernel: int) -> int:
        span = self.dilation * (axis_kernel - 1) + 1
        out = (size + 2 * self.padding - span) // self.stride + 1
        if out < 1:
            raise DimensionError(
                f"kernel span {span} exceeds padded extent {size + 2 * self.padding}"
            )
        return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv2dSpec) -> Tensor:
    """Grouped 2D convolution over NHWC input with implicit zero padding."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be rank 4 NHWC, got {x.shape}")
    if x.shape[-1] != spec.in_channels:
        raise DimensionError(
            f"input channels {x.shape[-1]} do not match spec in_channels {spec.in_channels}"
        )
    if w.shape != spec.weight_shape:
        raise DimensionError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {b.shape} must be ({spec.out_channels},)")
    kh, kw = spec.kernel_size
    spec.out_extent(x.shape[1], kh)
    spec.out_extent(x.shape[2], kw)
    out = backend.conv_forward(
        x.data, w.data, spec.stride, spec.padding, spec.dilation, spec.groups
    )
    saved = (x.data, w.data, spec, b is not None)
    if b is None:
        return _apply("conv2d", out, (x, w), saved)
    return _apply("conv2d", out + b.data, (x, w, b), saved)


def _vjp_conv2d(saved, g):
    xd, wd, spec, has_bias = saved
    g = np.ascontiguousarray(g)
    dx = backend.conv_backward_input(
        g, wd, xd.shape, spec.stride, spec.padding, spec.dilation, spec.groups
    )
    dw = backend.conv_backward_weight(
        g, xd, wd.shape, spec.stride, spec.padding, spec.dilation, spec.groups
    )
    if has_bias:
        return dx, dw, g.sum(axis=(0, 1, 2))
    return dx, dw


VJP_RULES["conv2d"] = _vjp_conv2d
