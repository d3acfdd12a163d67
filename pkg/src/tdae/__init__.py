"""Dual-attention hierarchical transformer segmentation, on a numpy autodiff core.

The package is organized as:

- ``tdae.engine``: tensors, tape-based reverse-mode autodiff, conv kernels
  (numba-accelerated with a pure-numpy fallback via ``TDAE_BACKEND``)
- ``tdae.attention``: efficient channel attention, spatial-reduction
  attention, and the dual transformer block
- ``tdae.isim``: large-kernel-attention skip interaction and fusion
- ``tdae.model``: the U-shaped encoder/decoder and its configuration
- ``tdae.metrics``: Dice and Hausdorff evaluation
- ``tdae.flops``: analytic attention cost models
- ``tdae.data``: tensor files, checkpoints, synthetic datasets
- ``tdae.train``: loss, optimizers, plateau stopping, resumable training
- ``tdae.checks``: finite-difference verification suite
- ``tdae.cli``: the ``tdae`` command
"""

from .attention import (
    DualBlockParams,
    EfficientAttentionParams,
    FeedForwardParams,
    NormParams,
    ReducedAttentionParams,
    dual_block_forward,
    efficient_attention,
    feed_forward,
    reduced_spatial_attention,
    standard_attention,
)
from .engine import Tape, Tensor, backward, finite_diff_check
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
    ParameterError,
    TensorFileError,
)
from .isim import FusionParams, LkaParams, fuse_skip, large_kernel_attention
from .metrics import EvalReport, dice, evaluate, hausdorff
from .model import ModelConfig, forward, init_weights, parameter_count, parameter_specs
from .train import TrainConfig, RunLog, train_run

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DualBlockParams",
    "EfficientAttentionParams",
    "EvalReport",
    "FeedForwardParams",
    "FusionParams",
    "LkaParams",
    "ModelConfig",
    "NormParams",
    "NumericError",
    "ParameterError",
    "ReducedAttentionParams",
    "RunLog",
    "Tape",
    "Tensor",
    "TensorFileError",
    "TrainConfig",
    "__version__",
    "backward",
    "dice",
    "dual_block_forward",
    "efficient_attention",
    "evaluate",
    "feed_forward",
    "finite_diff_check",
    "forward",
    "fuse_skip",
    "hausdorff",
    "init_weights",
    "large_kernel_attention",
    "parameter_count",
    "parameter_specs",
    "reduced_spatial_attention",
    "standard_attention",
    "train_run",
]
