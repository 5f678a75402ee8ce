"""Binary container shared by dataset and checkpoint files.

Layout (all integers little-endian int32)::

    magic[8] | version | count | resolution | fields | meta_len | meta (UTF-8 JSON)
    | payload (float64 little-endian, row-major) | FNV-1a 64 of payload (uint64 LE)
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numba
import numpy as np

VERSION = 1
_HEAD = struct.Struct("<8s5i")
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class FormatError(ValueError):
    """File does not follow the container layout (bad magic, truncation, checksum)."""


@numba.njit(cache=True)
def _fnv1a(data, h, prime):
    for b in data:
        h ^= np.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(buf, np.uint64(FNV_OFFSET), np.uint64(FNV_PRIME)))


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(magic: bytes, count: int, resolution: int, fields: int, meta: dict,
         payload: np.ndarray) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    head = _HEAD.pack(magic, VERSION, count, resolution, fields, len(meta_bytes))
    return head + meta_bytes + body + struct.pack("<Q", fnv1a64(body))


def unpack(data: bytes, magic: bytes, expected_values: int | None = None):
    """Return ``(count, resolution, fields, meta, payload)`` after validating ``data``."""
    if len(data) < _HEAD.size:
        raise FormatError("file too short for a header")
    got, version, count, resolution, fields, meta_len = _HEAD.unpack_from(data)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = _HEAD.size + meta_len
    if meta_len < 0 or len(data) < start + 8:
        raise FormatError("truncated header or metadata")
    try:
        meta = json.loads(data[_HEAD.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}") from exc
    body = data[start:-8]
    if expected_values is not None and len(body) != 8 * expected_values:
        raise FormatError(f"payload holds {len(body)} bytes, expected {8 * expected_values}")
    if len(body) % 8:
        raise FormatError("payload is not a whole number of float64 values")
    (stored,) = struct.unpack("<Q", data[-8:])
    if stored != fnv1a64(body):
        raise FormatError("checksum mismatch: payload is corrupt")
    return count, resolution, fields, meta, np.frombuffer(body, dtype="<f8").astype(np.float64)
