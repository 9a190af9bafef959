"""Flat binary parameter checkpoints.

Layout (little-endian)::

    magic       4 bytes   b"MMFC"
    version     uint16    1
    count       uint32    number of parameter records
    record * count:
        name_len  uint16
        name      UTF-8 bytes
        rank      uint8
        dims      uint32 * rank
        payload   float32 * prod(dims), row-major

Records are written in the order given, which for model parameters is the
sorted name order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from mmfusion.errors import FormatError

MAGIC = b"MMFC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def encode_params(params: dict[str, np.ndarray]) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_params(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated checkpoint header", 0)
    magic, version, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    off = _HEAD.size
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError("truncated checkpoint payload", off)
        chunk = buf[off : off + n]
        off += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8", off - name_len) from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).copy()
    if off != len(buf):
        raise FormatError("trailing bytes after last record", off)
    return out


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    atomic_write_bytes(path, encode_params(params))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
