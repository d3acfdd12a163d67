"""Attention kernels: standard, channel-wise linear-cost, and
spatial-reduction multi-head, plus the dual block that chains them.

Token layout is (batch, tokens, channels); rank-2 (tokens, channels)
inputs are accepted everywhere and treated as batch 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .engine.tensor import Tensor, gelu, layer_norm, matmul, softmax
from .errors import ConfigurationError, DimensionError

NORMALIZATIONS = ("softmax", "identity", "rsqrt_n")


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class EfficientAttentionParams:
    """Projections for channel attention; d_k defaults to d/2, d_v to d."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    normalization: str = "softmax"

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(
                f"normalization {self.normalization!r} not one of {NORMALIZATIONS}"
            )
        if self.w_q.shape != self.w_k.shape:
            raise DimensionError(
                f"query/key projections disagree: {self.w_q.shape} vs {self.w_k.shape}"
            )


@dataclass
class ReducedAttentionParams:
    """Multi-head attention with key/value token reduction by ``ratio``."""

    heads: int
    ratio: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    w_reduce: Tensor

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.heads < 1 or c % self.heads:
            raise ConfigurationError(f"heads {self.heads} must divide width {c}")
        if self.ratio < 1:
            raise ConfigurationError(f"ratio must be >= 1, got {self.ratio}")
        if self.w_reduce.shape != (c * self.ratio, c):
            raise DimensionError(
                f"w_reduce shape {self.w_reduce.shape} != ({c * self.ratio}, {c})"
            )


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DualBlockParams:
    """Pre-norm residual block: channel attention, optional spatial
    attention, feed-forward. ``spatial_attn is None`` gives the single
    attention baseline."""

    norm1: NormParams
    channel_attn: EfficientAttentionParams
    norm3: NormParams
    ffn: FeedForwardParams
    norm2: NormParams | None = None
    spatial_attn: ReducedAttentionParams | None = None


def _t(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.permute(axes)


def standard_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> Tensor:
    """softmax(q k^T * scale) v with scale defaulting to 1/sqrt(d_k)."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"q/k widths disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"k/v token counts disagree: {k.shape} vs {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, _t(k)) * scale
    return matmul(softmax(scores, axis=-1), v)


def efficient_attention(x: Tensor, p: EfficientAttentionParams) -> Tensor:
    """Linear-cost attention: normalized keys aggregate values into a
    (d_k, d_v) context matrix that normalized queries then read out."""
    if x.shape[-1] != p.w_q.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != projection rows {p.w_q.shape[0]}")
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    if p.normalization == "softmax":
        q = softmax(q, axis=-1)  # per token, over channels
        k = softmax(k, axis=-2)  # per channel, over tokens
    elif p.normalization == "rsqrt_n":
        s = 1.0 / math.sqrt(x.shape[-2])
        q = q * s
        k = k * s
    context = matmul(_t(k), v)
    return matmul(matmul(q, context), p.w_out)


def _split_heads(x: Tensor, b: int, n: int, heads: int) -> Tensor:
    dh = x.shape[-1] // heads
    return x.reshape((b, n, heads, dh)).permute((0, 2, 1, 3)).reshape((b * heads, n, dh))


def _merge_heads(x: Tensor, b: int, n: int, heads: int) -> Tensor:
    dh = x.shape[-1]
    return x.reshape((b, heads, n, dh)).permute((0, 2, 1, 3)).reshape((b, n, heads * dh))


def reduced_spatial_attention(x: Tensor, p: ReducedAttentionParams) -> Tensor:
    """Multi-head attention whose keys/values are first shrunk ``ratio``-fold.

    Runs of ``ratio`` consecutive tokens are flattened channel-wise and a
    shared (c*ratio, c) matrix projects each run back to width c, cutting
    the quadratic score cost by the same factor.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    b, n, c = x.shape
    if x.shape[-1] != p.w_q.shape[0]:
        raise DimensionError(f"input width {c} != projection rows {p.w_q.shape[0]}")
    if n % p.ratio:
        raise ConfigurationError(f"reduction ratio {p.ratio} does not divide token count {n}")
    q = matmul(x, p.w_q)
    k = matmul(x, p.w_k)
    v = matmul(x, p.w_v)
    m = n // p.ratio
    k = matmul(k.reshape((b, m, c * p.ratio)), p.w_reduce)
    v = matmul(v.reshape((b, m, c * p.ratio)), p.w_reduce)
    qh = _split_heads(q, b, n, p.heads)
    kh = _split_heads(k, b, m, p.heads)
    vh = _split_heads(v, b, m, p.heads)
    att = _merge_heads(standard_attention(qh, kh, vh), b, n, p.heads)
    out = matmul(att, p.w_out)
    return out.reshape(out.shape[1:]) if squeeze else out


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return matmul(gelu(matmul(x, p.w1) + p.b1), p.w2) + p.b2


def dual_block_forward(x: Tensor, p: DualBlockParams) -> Tensor:
    """Sequential pre-norm residual sublayers; output shape equals input shape."""
    x = x + efficient_attention(layer_norm(x, p.norm1.gamma, p.norm1.beta), p.channel_attn)
    if p.spatial_attn is not None:
        x = x + reduced_spatial_attention(
            layer_norm(x, p.norm2.gamma, p.norm2.beta), p.spatial_attn
        )
    return x + feed_forward(layer_norm(x, p.norm3.gamma, p.norm3.beta), p.ffn)
