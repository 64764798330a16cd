"""Bit-exact binary checkpoint container.

Layout (all integers little-endian)::

    0   4   magic  b"BPCK"
    4   4   u32    format version (1)
    8   8   u64    payload length in bytes
    16  4   u32    CRC-32 of the payload
    20  ..  payload

    payload:
      u32 tensor count, then per tensor:
        u16 name length, UTF-8 name,
        u8 dtype code (0 f64, 1 f32, 2 i64, 3 u8), u8 ndim, u64 x ndim dims,
        raw little-endian element bytes (row-major)
      u32 metadata length, UTF-8 JSON object (sorted keys)

The metadata object carries pruner scalars (tau, iteration, threshold,
phase position), the block partition descriptor and the config hash.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BPCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _encode_tensor(name: str, value: np.ndarray) -> bytes:
    arr = np.asarray(value)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype.kind == "f":
        dtype = np.dtype("<f8") if dtype.itemsize == 8 else np.dtype("<f4")
    elif dtype.kind in "iu" and dtype != np.dtype("u1"):
        dtype = np.dtype("<i8")
    elif dtype.kind == "b":
        dtype = np.dtype("u1")
    if dtype not in _CODES:
        raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", _CODES[dtype], arr.ndim)
    return head + struct.pack(f"<{arr.ndim}Q", *arr.shape) + raw


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    parts = [struct.pack("<I", len(tensors))]
    for name in tensors:
        parts.append(_encode_tensor(name, tensors[name]))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    payload = b"".join(parts)
    header = _HEADER.pack(MAGIC, VERSION, len(payload), zlib.crc32(payload))
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, length, crc = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload = buf[_HEADER.size :]
    if len(payload) != length:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {length}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload at offset {pos}")
        chunk = payload[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    return Checkpoint(tensors, meta)
