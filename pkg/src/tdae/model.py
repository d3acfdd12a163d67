"""U-shaped dual-attention segmentation model.

A strided overlapping patch embedding produces tokens at 1/4 resolution;
three encoder stages of dual attention blocks are bridged by 2x2 patch
merging into a bottleneck, then mirrored by a decoder whose stages expand
resolution, fuse the matching encoder skip, and run further blocks. A 4x
expansion head restores full resolution and projects to class logits.

Stage widths follow C, 2C, 4C, 8C; stage i holds (H / 2^(i+1)) * (W / 2^(i+1))
tokens. Parameters live in a flat name -> Tensor map so checkpoints,
optimizers, and gradient checks can treat the model uniformly.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .attention import (
    DualBlockParams,
    EfficientAttentionParams,
    FeedForwardParams,
    NormParams,
    ReducedAttentionParams,
    dual_block_forward,
)
from .engine.conv import Conv2dSpec, conv2d
from .engine.tensor import Tensor, layer_norm, matmul
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    ParameterError,
)
from .isim import FusionParams, LkaParams, fuse_skip

VARIANTS = ("baseline", "dual", "dual+isim")
INIT_SCHEMES = ("scaled_normal", "standard_normal")

_PATCH_KERNEL = 7
_PATCH_STRIDE = 4
_PATCH_PAD = 3


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    num_classes: int = 4
    embed_dim: int = 32
    depths: tuple[int, int, int] = (2, 2, 2)
    bottleneck_depth: int = 2
    reduction_ratios: tuple[int, int, int, int] = (4, 2, 1, 1)
    heads: tuple[int, int, int, int] = (4, 4, 4, 4)
    variant: str = "dual+isim"
    init_scheme: str = "scaled_normal"
    lka_dilation: int = 3
    lka_kernel: int = 7

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigurationError(f"input_size {self.input_size} must be multiples of 32")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigurationError(f"embed_dim must be even and >= 2, got {self.embed_dim}")
        if len(self.depths) != 3 or any(d < 1 for d in self.depths):
            raise ConfigurationError(f"depths must be 3 positive counts, got {self.depths}")
        if self.bottleneck_depth < 1:
            raise ConfigurationError("bottleneck_depth must be >= 1")
        if len(self.reduction_ratios) != 4 or any(r < 1 for r in self.reduction_ratios):
            raise ConfigurationError(f"need 4 reduction ratios >= 1, got {self.reduction_ratios}")
        if len(self.heads) != 4 or any(hd < 1 for hd in self.heads):
            raise ConfigurationError(f"need 4 head counts >= 1, got {self.heads}")
        for i in range(4):
            if self.stage_dims[i] % self.heads[i]:
                raise ConfigurationError(
                    f"stage {i + 1} width {self.stage_dims[i]} not divisible by heads {self.heads[i]}"
                )
            if self.token_counts[i] % self.reduction_ratios[i]:
                raise ConfigurationError(
                    f"stage {i + 1} token count {self.token_counts[i]} not divisible by "
                    f"ratio {self.reduction_ratios[i]}"
                )
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant {self.variant!r} not one of {VARIANTS}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigurationError(f"init_scheme {self.init_scheme!r} not one of {INIT_SCHEMES}")
        if self.lka_dilation < 1 or self.lka_kernel < 1 or self.lka_kernel % 2 == 0:
            raise ConfigurationError(
                f"lka_dilation {self.lka_dilation} must be >= 1 and lka_kernel "
                f"{self.lka_kernel} odd"
            )

    @property
    def stage_dims(self) -> tuple[int, int, int, int]:
        c = self.embed_dim
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def token_counts(self) -> tuple[int, int, int, int]:
        h, w = self.input_size
        return tuple((h >> (i + 2)) * (w >> (i + 2)) for i in range(4))

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "depths": list(self.depths),
            "bottleneck_depth": self.bottleneck_depth,
            "reduction_ratios": list(self.reduction_ratios),
            "heads": list(self.heads),
            "variant": self.variant,
            "init_scheme": self.init_scheme,
            "lka_dilation": self.lka_dilation,
            "lka_kernel": self.lka_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        kw = dict(d)
        for key in ("input_size", "depths", "reduction_ratios", "heads"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class TokenMap:
    """Token matrix (batch, tokens, channels) with its spatial grid."""

    tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.ndim != 3 or h * w != self.tokens.shape[1]:
            raise DimensionError(
                f"grid {self.grid} does not cover token shape {self.tokens.shape}"
            )


# --------------------------------------------------------------------------
# parameter construction

def _block_specs(prefix: str, d: int, ratio: int, variant: str) -> list[tuple[str, tuple, str]]:
    dk = d // 2
    specs = [
        (f"{prefix}.norm1.gamma", (d,), "gamma"),
        (f"{prefix}.norm1.beta", (d,), "beta"),
        (f"{prefix}.channel_attn.w_q", (d, dk), "proj"),
        (f"{prefix}.channel_attn.w_k", (d, dk), "proj"),
        (f"{prefix}.channel_attn.w_v", (d, d), "proj"),
        (f"{prefix}.channel_attn.w_out", (d, d), "proj"),
    ]
    if variant != "baseline":
        specs += [
            (f"{prefix}.norm2.gamma", (d,), "gamma"),
            (f"{prefix}.norm2.beta", (d,), "beta"),
            (f"{prefix}.spatial_attn.w_q", (d, d), "proj"),
            (f"{prefix}.spatial_attn.w_k", (d, d), "proj"),
            (f"{prefix}.spatial_attn.w_v", (d, d), "proj"),
            (f"{prefix}.spatial_attn.w_out", (d, d), "proj"),
            (f"{prefix}.spatial_attn.w_reduce", (d * ratio, d), "proj"),
        ]
    specs += [
        (f"{prefix}.norm3.gamma", (d,), "gamma"),
        (f"{prefix}.norm3.beta", (d,), "beta"),
        (f"{prefix}.ffn.w1", (d, 4 * d), "proj"),
        (f"{prefix}.ffn.b1", (4 * d,), "bias"),
        (f"{prefix}.ffn.w2", (4 * d, d), "proj"),
        (f"{prefix}.ffn.b2", (d,), "bias"),
    ]
    return specs


def parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Names, shapes, and init kinds of every parameter, in draw order."""
    dims = cfg.stage_dims
    c = cfg.embed_dim
    specs: list[tuple[str, tuple, str]] = [
        ("patch_embed.conv.weight", (_PATCH_KERNEL, _PATCH_KERNEL, cfg.in_channels, c), "proj"),
        ("patch_embed.conv.bias", (c,), "bias"),
        ("patch_embed.norm.gamma", (c,), "gamma"),
        ("patch_embed.norm.beta", (c,), "beta"),
    ]
    for i in range(1, 4):
        d = dims[i - 1]
        for j in range(cfg.depths[i - 1]):
            specs += _block_specs(
                f"encoder.stage{i}.block{j}", d, cfg.reduction_ratios[i - 1], cfg.variant
            )
        specs.append((f"encoder.stage{i}.merge.weight", (4 * d, 2 * d), "proj"))
    for j in range(cfg.bottleneck_depth):
        specs += _block_specs(
            f"bottleneck.block{j}", dims[3], cfg.reduction_ratios[3], cfg.variant
        )
    kdw = 2 * cfg.lka_dilation - 1
    for i in range(3, 0, -1):
        d_in, d_out = dims[i], dims[i - 1]
        specs.append((f"decoder.stage{i}.expand.weight", (d_in, 2 * d_in), "proj"))
        if cfg.variant == "dual+isim":
            specs += [
                (f"decoder.stage{i}.fuse.lka.dw", (kdw, kdw, 1, d_out), "proj"),
                (f"decoder.stage{i}.fuse.lka.dwd", (cfg.lka_kernel, cfg.lka_kernel, 1, d_out), "proj"),
                (f"decoder.stage{i}.fuse.lka.pw", (1, 1, d_out, d_out), "proj"),
            ]
        specs += [
            (f"decoder.stage{i}.fuse.weight", (2 * d_out, d_out), "proj"),
            (f"decoder.stage{i}.fuse.bias", (d_out,), "bias"),
        ]
        for j in range(cfg.depths[i - 1]):
            specs += _block_specs(
                f"decoder.stage{i}.block{j}", d_out, cfg.reduction_ratios[i - 1], cfg.variant
            )
    specs += [
        ("head.expand.weight", (c, 16 * c), "proj"),
        ("head.proj.weight", (c, cfg.num_classes), "proj"),
        ("head.proj.bias", (cfg.num_classes,), "bias"),
    ]
    return specs


def init_weights(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Deterministic initialization: one rng stream, fixed draw order.

    Projections draw N(0, 0.02^2) by default; ``standard_normal`` draws
    N(0, 1). Biases start at zero, norm gains at one.
    """
    rng = np.random.default_rng(seed)
    std = 0.02 if cfg.init_scheme == "scaled_normal" else 1.0
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_specs(cfg):
        if kind == "proj":
            arr = rng.standard_normal(shape) * std
        elif kind == "gamma":
            arr = np.ones(shape)
        else:  # bias, beta
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def _p(params: dict[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ContractError(f"missing parameter {name!r}") from None


def _block_params(params: dict[str, Tensor], prefix: str, cfg: ModelConfig, ratio: int, heads: int) -> DualBlockParams:
    channel = EfficientAttentionParams(
        w_q=_p(params, f"{prefix}.channel_attn.w_q"),
        w_k=_p(params, f"{prefix}.channel_attn.w_k"),
        w_v=_p(params, f"{prefix}.channel_attn.w_v"),
        w_out=_p(params, f"{prefix}.channel_attn.w_out"),
    )
    spatial = norm2 = None
    if cfg.variant != "baseline":
        norm2 = NormParams(_p(params, f"{prefix}.norm2.gamma"), _p(params, f"{prefix}.norm2.beta"))
        spatial = ReducedAttentionParams(
            heads=heads,
            ratio=ratio,
            w_q=_p(params, f"{prefix}.spatial_attn.w_q"),
            w_k=_p(params, f"{prefix}.spatial_attn.w_k"),
            w_v=_p(params, f"{prefix}.spatial_attn.w_v"),
            w_out=_p(params, f"{prefix}.spatial_attn.w_out"),
            w_reduce=_p(params, f"{prefix}.spatial_attn.w_reduce"),
        )
    return DualBlockParams(
        norm1=NormParams(_p(params, f"{prefix}.norm1.gamma"), _p(params, f"{prefix}.norm1.beta")),
        channel_attn=channel,
        norm2=norm2,
        spatial_attn=spatial,
        norm3=NormParams(_p(params, f"{prefix}.norm3.gamma"), _p(params, f"{prefix}.norm3.beta")),
        ffn=FeedForwardParams(
            w1=_p(params, f"{prefix}.ffn.w1"),
            b1=_p(params, f"{prefix}.ffn.b1"),
            w2=_p(params, f"{prefix}.ffn.w2"),
            b2=_p(params, f"{prefix}.ffn.b2"),
        ),
    )


def _fusion_params(params: dict[str, Tensor], stage: int, cfg: ModelConfig) -> FusionParams:
    lka = None
    if cfg.variant == "dual+isim":
        lka = LkaParams(
            dw=_p(params, f"decoder.stage{stage}.fuse.lka.dw"),
            dwd=_p(params, f"decoder.stage{stage}.fuse.lka.dwd"),
            pw=_p(params, f"decoder.stage{stage}.fuse.lka.pw"),
            dilation=cfg.lka_dilation,
        )
    return FusionParams(
        w_fuse=_p(params, f"decoder.stage{stage}.fuse.weight"),
        b_fuse=_p(params, f"decoder.stage{stage}.fuse.bias"),
        lka=lka,
    )


@contextmanager
def _stage_path(path: str):
    try:
        yield
    except (DimensionError, ConfigurationError, ContractError, ParameterError) as e:
        raise type(e)(f"{path}: {e}") from e


# --------------------------------------------------------------------------
# structural layers

def patch_embed(x: Tensor, params: dict[str, Tensor], cfg: ModelConfig) -> TokenMap:
    """Overlapping 7x7 stride-4 convolution, flatten, layer norm."""
    spec = Conv2dSpec(
        cfg.in_channels, cfg.embed_dim, (_PATCH_KERNEL, _PATCH_KERNEL),
        stride=_PATCH_STRIDE, padding=_PATCH_PAD,
    )
    y = conv2d(x, _p(params, "patch_embed.conv.weight"), _p(params, "patch_embed.conv.bias"), spec)
    b, h, w, c = y.shape
    tokens = layer_norm(
        y.reshape((b, h * w, c)),
        _p(params, "patch_embed.norm.gamma"),
        _p(params, "patch_embed.norm.beta"),
    )
    return TokenMap(tokens, (h, w))


def patch_merge(t: TokenMap, weight: Tensor) -> TokenMap:
    """Concatenate each 2x2 token neighborhood to 4c, project to 2c."""
    b, n, c = t.tokens.shape
    h, w = t.grid
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merge needs an even grid, got {t.grid}")
    if weight.shape != (4 * c, 2 * c):
        raise DimensionError(f"merge weight {weight.shape} must be ({4 * c}, {2 * c})")
    x = t.tokens.reshape((b, h // 2, 2, w // 2, 2, c))
    x = x.permute((0, 1, 3, 2, 4, 5)).reshape((b, (h // 2) * (w // 2), 4 * c))
    return TokenMap(matmul(x, weight), (h // 2, w // 2))


def patch_expand(t: TokenMap, weight: Tensor) -> TokenMap:
    """Project c to 2c and rearrange into a 2x-resolution grid of width c/2."""
    b, n, c = t.tokens.shape
    h, w = t.grid
    if c % 2:
        raise ConfigurationError(f"patch_expand needs even width, got {c}")
    if weight.shape != (c, 2 * c):
        raise DimensionError(f"expand weight {weight.shape} must be ({c}, {2 * c})")
    c2 = c // 2
    y = matmul(t.tokens, weight)
    y = y.reshape((b, h, w, 2, 2, c2)).permute((0, 1, 3, 2, 4, 5))
    return TokenMap(y.reshape((b, 4 * n, c2)), (2 * h, 2 * w))


def final_project(t: TokenMap, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """4x token expansion back to pixel resolution, then per-pixel logits."""
    h, w = t.grid
    hh, ww = cfg.input_size
    if (h, w) != (hh // 4, ww // 4):
        raise DimensionError(f"head expects grid {(hh // 4, ww // 4)}, got {t.grid}")
    b, n, c = t.tokens.shape
    y = matmul(t.tokens, _p(params, "head.expand.weight"))
    y = y.reshape((b, h, w, 4, 4, c)).permute((0, 1, 3, 2, 4, 5)).reshape((b, hh * ww, c))
    logits = matmul(y, _p(params, "head.proj.weight")) + _p(params, "head.proj.bias")
    return logits.reshape((b, hh, ww, cfg.num_classes))


def forward(
    x: Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    collect: list | None = None,
) -> Tensor:
    """Full segmentation forward pass; returns (batch, H, W, num_classes) logits."""
    hh, ww = cfg.input_size
    if x.ndim != 4 or x.shape[1:] != (hh, ww, cfg.in_channels):
        raise DimensionError(
            f"input shape {x.shape} must be (batch, {hh}, {ww}, {cfg.in_channels})"
        )
    some = next(iter(params.values()))
    if x.dtype != some.dtype:
        raise ParameterError(f"input dtype {x.dtype} does not match parameters {some.dtype}")

    def note(name: str, t: TokenMap) -> None:
        if collect is not None:
            collect.append(
                {"stage": name, "tokens": t.tokens.shape[1], "dim": t.tokens.shape[2], "grid": t.grid}
            )

    with _stage_path("patch_embed"):
        t = patch_embed(x, params, cfg)
    skips: list[TokenMap] = []
    for i in range(1, 4):
        for j in range(cfg.depths[i - 1]):
            prefix = f"encoder.stage{i}.block{j}"
            with _stage_path(prefix):
                bp = _block_params(params, prefix, cfg, cfg.reduction_ratios[i - 1], cfg.heads[i - 1])
                t = TokenMap(dual_block_forward(t.tokens, bp), t.grid)
        note(f"encoder{i}", t)
        skips.append(t)
        with _stage_path(f"encoder.stage{i}.merge"):
            t = patch_merge(t, _p(params, f"encoder.stage{i}.merge.weight"))
    for j in range(cfg.bottleneck_depth):
        prefix = f"bottleneck.block{j}"
        with _stage_path(prefix):
            bp = _block_params(params, prefix, cfg, cfg.reduction_ratios[3], cfg.heads[3])
            t = TokenMap(dual_block_forward(t.tokens, bp), t.grid)
    note("bottleneck", t)
    for i in range(3, 0, -1):
        with _stage_path(f"decoder.stage{i}.expand"):
            t = patch_expand(t, _p(params, f"decoder.stage{i}.expand.weight"))
        skip = skips[i - 1]
        if skip.tokens.shape != t.tokens.shape or skip.grid != t.grid:
            raise ContractError(
                f"decoder.stage{i}: skip shape {skip.tokens.shape}/{skip.grid} does not "
                f"mirror decoder {t.tokens.shape}/{t.grid}"
            )
        with _stage_path(f"decoder.stage{i}.fuse"):
            fused = fuse_skip(t.tokens, skip.tokens, _fusion_params(params, i, cfg), t.grid)
            t = TokenMap(fused, t.grid)
        for j in range(cfg.depths[i - 1]):
            prefix = f"decoder.stage{i}.block{j}"
            with _stage_path(prefix):
                bp = _block_params(params, prefix, cfg, cfg.reduction_ratios[i - 1], cfg.heads[i - 1])
                t = TokenMap(dual_block_forward(t.tokens, bp), t.grid)
        note(f"decoder{i}", t)
    with _stage_path("head"):
        return final_project(t, params, cfg)
