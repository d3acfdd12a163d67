"""Persistence and dataset utilities."""

from .batches import batch_iter
from .checkpoint import load_checkpoint, save_checkpoint
from .synth import SynthSpec, load_dataset, save_dataset, synth_generate, synth_generate_detailed
from .tensorfile import decode_tensor, encode_tensor, read_tensor, write_tensor

__all__ = [
    "SynthSpec",
    "batch_iter",
    "decode_tensor",
    "encode_tensor",
    "load_checkpoint",
    "load_dataset",
    "read_tensor",
    "save_checkpoint",
    "save_dataset",
    "synth_generate",
    "synth_generate_detailed",
    "write_tensor",
]
