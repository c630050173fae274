"""Binary checkpoint format.

Layout (all integers u32 little-endian):

    magic "DIFFRX01"
    meta_len, meta JSON (UTF-8, canonical key order)
    tensor_count
    per tensor: name_len, name UTF-8, rank, dims..., float64 LE payload

The meta block echoes the model/schedule configuration so loaders can
validate shapes before touching the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataFormatError

MAGIC = b"DIFFRX01"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.asarray(getattr(value, "data", value), dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError(f"{path}: missing checkpoint magic {MAGIC!r}")
    offset = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise DataFormatError(f"{path}: truncated checkpoint at byte {offset}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    def take_u32() -> int:
        return struct.unpack("<I", take(4))[0]

    meta = json.loads(take(take_u32()).decode())
    tensors: dict[str, np.ndarray] = {}
    for _ in range(take_u32()):
        name = take(take_u32()).decode()
        rank = take_u32()
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(take(8 * count), dtype="<f8")
        tensors[name] = payload.reshape(dims).astype(np.float64)
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return tensors, meta
