"""Inter-scale interaction: large-kernel attention over encoder skip
features, then fusion with the decoder stream.

The attention map is a decomposed large-kernel convolution (depthwise,
depthwise-dilated, pointwise) applied multiplicatively to its input.
There is deliberately no squashing nonlinearity on the map, so it scales
linearly with the feature it gates; all three convolutions are bias-free
for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine.conv import Conv2dSpec, conv2d
from .engine.tensor import Tensor, concat, matmul
from .errors import ConfigurationError, DimensionError


def receptive_field_side(dilation: int, kernel: int) -> int:
    """Side length covered by the (2d-1) depthwise + k'-dilated stack."""
    return (2 * dilation - 1) + (kernel - 1) * dilation


@dataclass
class LkaParams:
    """Decomposed large-kernel attention weights for width-c features.

    dw:  (2d-1, 2d-1, 1, c) depthwise
    dwd: (k', k', 1, c) depthwise with dilation d
    pw:  (1, 1, c, c) pointwise
    """

    dw: Tensor
    dwd: Tensor
    pw: Tensor
    dilation: int

    def __post_init__(self):
        d = self.dilation
        if d < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {d}")
        side = 2 * d - 1
        if self.dw.shape[0] != side or self.dw.shape[1] != side:
            raise ConfigurationError(
                f"depthwise kernel side {self.dw.shape[:2]} must be {side} for dilation {d}"
            )
        if self.dwd.shape[0] % 2 == 0 or self.dwd.shape[0] != self.dwd.shape[1]:
            raise ConfigurationError(f"dilated kernel must be odd square, got {self.dwd.shape[:2]}")
        c = self.pw.shape[-1]
        if self.dw.shape != (side, side, 1, c) or self.dwd.shape[2:] != (1, c):
            raise DimensionError("kernel channel counts disagree with pointwise width")
        if self.pw.shape != (1, 1, c, c):
            raise DimensionError(f"pointwise must be (1, 1, c, c), got {self.pw.shape}")

    @property
    def width(self) -> int:
        return self.pw.shape[-1]

    @property
    def receptive_field(self) -> int:
        return receptive_field_side(self.dilation, self.dwd.shape[0])


def large_kernel_attention(f: Tensor, p: LkaParams) -> Tensor:
    """attention_map(f) * f over an NHWC feature map."""
    if f.ndim != 4:
        raise DimensionError(f"expected NHWC features, got {f.shape}")
    c = p.width
    if f.shape[-1] != c:
        raise DimensionError(f"feature width {f.shape[-1]} != kernel width {c}")
    d = p.dilation
    kdw = p.dw.shape[0]
    kdd = p.dwd.shape[0]
    a = conv2d(
        f, p.dw, None,
        Conv2dSpec(c, c, (kdw, kdw), padding=(kdw - 1) // 2, groups=c),
    )
    a = conv2d(
        a, p.dwd, None,
        Conv2dSpec(c, c, (kdd, kdd), padding=(kdd - 1) * d // 2, dilation=d, groups=c),
    )
    a = conv2d(a, p.pw, None, Conv2dSpec(c, c, (1, 1)))
    return a * f


@dataclass
class FusionParams:
    """Skip fusion: optional large-kernel gate on the encoder tokens,
    then concat with the decoder tokens and a (2c, c) projection."""

    w_fuse: Tensor
    b_fuse: Tensor
    lka: LkaParams | None = None


def fuse_skip(
    decoder_tokens: Tensor,
    encoder_tokens: Tensor,
    p: FusionParams,
    grid: tuple[int, int],
) -> Tensor:
    if decoder_tokens.shape != encoder_tokens.shape:
        raise DimensionError(
            f"decoder {decoder_tokens.shape} and encoder {encoder_tokens.shape} shapes differ"
        )
    squeeze = decoder_tokens.ndim == 2
    if squeeze:
        decoder_tokens = decoder_tokens.reshape((1,) + decoder_tokens.shape)
        encoder_tokens = encoder_tokens.reshape((1,) + encoder_tokens.shape)
    b, n, c = decoder_tokens.shape
    h, w = grid
    if h * w != n:
        raise DimensionError(f"grid {grid} does not cover {n} tokens")
    if p.w_fuse.shape != (2 * c, c):
        raise DimensionError(f"fusion projection {p.w_fuse.shape} must be ({2 * c}, {c})")
    if p.lka is not None:
        gated = large_kernel_attention(encoder_tokens.reshape((b, h, w, c)), p.lka)
        encoder_tokens = gated.reshape((b, n, c))
    out = matmul(concat([decoder_tokens, encoder_tokens], axis=-1), p.w_fuse) + p.b_fuse
    return out.reshape(out.shape[1:]) if squeeze else out
