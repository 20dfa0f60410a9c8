"""Versioned binary checkpoint.

Layout (all integers little-endian)::

    8 bytes   magic  b"CGHCKPT\\0"
    uint32    format version (1)
    uint32    length L of the JSON config block
    L bytes   UTF-8 JSON
    uint32    number of records R
    R times:
      uint16  name length, then UTF-8 name
      uint8   dtype string length, then ASCII numpy dtype string ("<f4", "<f8", ...)
      uint8   ndim, then ndim x uint32 shape
      uint64  payload length, then raw little-endian payload (C order)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGHCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        arr = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        name_b = name.encode("utf-8")
        dt = arr.dtype.str.encode("ascii")
        payload = arr.tobytes(order="C")
        parts += [
            struct.pack("<H", len(name_b)), name_b,
            struct.pack("<B", len(dt)), dt,
            struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
            struct.pack("<Q", len(payload)), payload,
        ]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack(fmt, raw[pos:pos + size])
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated")
        b = raw[pos:pos + n]
        pos += n
        return b

    version, clen = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(take_bytes(clen).decode("utf-8"))
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = take_bytes(nlen).decode("utf-8")
        (dlen,) = take("<B")
        dtype = np.dtype(take_bytes(dlen).decode("ascii"))
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (plen,) = take("<Q")
        arr = np.frombuffer(take_bytes(plen), dtype=dtype).reshape(shape)
        state[name] = arr.astype(dtype.newbyteorder("="))
    return config, state
