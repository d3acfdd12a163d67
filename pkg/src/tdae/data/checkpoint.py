"""Checkpoint container: one JSON header plus named tensor blocks.

Layout, little-endian:

    header_len u64, header JSON (utf-8, sorted keys)
    n_blocks   u32
    per block: name_len u16, name utf-8, block_len u64, tensor container bytes

Blocks are written in sorted name order and the header is serialized
canonically, so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, TruncatedPayloadError
from .tensorfile import decode_tensor, encode_tensor


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<Q", len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        blob = encode_tensor(tensors[name])
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", len(blob)))
        parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncatedPayloadError(f"checkpoint ends inside {what}")
        out = blob[off : off + n]
        off += n
        return out

    (head_len,) = struct.unpack("<Q", take(8, "header length"))
    try:
        header = json.loads(take(head_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractError(f"checkpoint header is not valid JSON: {e}") from None
    (n_blocks,) = struct.unpack("<I", take(4, "block count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (blk_len,) = struct.unpack("<Q", take(8, "block length"))
        tensors[name] = decode_tensor(take(blk_len, f"tensor {name!r}"))
    if off != len(blob):
        raise ContractError(f"{len(blob) - off} trailing bytes after last block")
    return header, tensors


def require_matching_config(header: dict, expected: dict, what: str = "model") -> None:
    """Refuse to run against state from a different configuration."""
    found = header.get(what)
    if found != expected:
        raise ContractError(
            f"checkpoint {what} config {found!r} does not match expected {expected!r}"
        )
