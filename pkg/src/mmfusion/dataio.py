"""Binary dataset files.

Layout (little-endian)::

    magic        4 bytes  b"MMFD"
    version      uint16   1
    d_s d_e d_a d_w       uint16 each
    video_count  uint32
    video * video_count:
        id_len       uint16
        id           UTF-8 bytes
        frame_count  uint32
        frame * frame_count (packed, no padding):
            static_feat  float32 * d_s
            expr_emb     float32 * d_e
            audio_feat   float32 * d_a
            word_emb     float32 * d_w
            au_label     uint16   bit j = unit j active (j < 12); bit 15 set = no AU label
            expr_label   uint8    class id, 255 = no expression label
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mmfusion.checkpoint import atomic_write_bytes
from mmfusion.errors import FormatError
from mmfusion.features import NUM_AU, FeatureDims, Video

MAGIC = b"MMFD"
VERSION = 1
_HEAD = struct.Struct("<4sH4HI")
AU_ABSENT = 1 << 15
EXPR_ABSENT = 255
_AU_WEIGHTS = (1 << np.arange(NUM_AU)).astype(np.uint16)


def frame_dtype(dims: FeatureDims) -> np.dtype:
    return np.dtype(
        [
            ("static", "<f4", (dims.d_s,)),
            ("expr_emb", "<f4", (dims.d_e,)),
            ("audio", "<f4", (dims.d_a,)),
            ("word", "<f4", (dims.d_w,)),
            ("au", "<u2"),
            ("expr", "u1"),
        ]
    )


def _pack_au(au: np.ndarray | None, T: int) -> np.ndarray:
    if au is None:
        return np.full(T, AU_ABSENT, dtype=np.uint16)
    au = np.asarray(au)
    absent = au[:, 0] < 0
    bits = (np.clip(au, 0, 1).astype(np.uint16) * _AU_WEIGHTS).sum(axis=1).astype(np.uint16)
    bits[absent] = AU_ABSENT
    return bits


def _unpack_au(bits: np.ndarray) -> np.ndarray | None:
    absent = (bits & AU_ABSENT) != 0
    if absent.all() and len(bits):
        return None
    au = ((bits[:, None] >> np.arange(NUM_AU)) & 1).astype(np.int8)
    au[absent] = -1
    return au


def encode_dataset(videos: list[Video], dims: FeatureDims | None = None) -> bytes:
    if dims is None:
        dims = videos[0].dims if videos else FeatureDims()
    dims = FeatureDims(*dims)
    dt = frame_dtype(dims)
    parts = [_HEAD.pack(MAGIC, VERSION, *dims, len(videos))]
    for v in videos:
        if v.dims != dims:
            raise FormatError(f"video {v.video_id} has dims {tuple(v.dims)}, file declares {tuple(dims)}")
        T = len(v)
        rec = np.empty(T, dtype=dt)
        rec["static"] = v.static
        rec["expr_emb"] = v.expr_emb
        rec["audio"] = v.audio
        rec["word"] = v.word
        rec["au"] = _pack_au(v.au_labels, T)
        if v.expr_labels is None:
            rec["expr"] = EXPR_ABSENT
        else:
            rec["expr"] = np.where(v.expr_labels < 0, EXPR_ABSENT, v.expr_labels).astype(np.uint8)
        raw_id = v.video_id.encode("utf-8")
        parts += [struct.pack("<H", len(raw_id)), raw_id, struct.pack("<I", T), rec.tobytes()]
    return b"".join(parts)


def decode_dataset(buf: bytes, expected_dims: FeatureDims | None = None) -> list[Video]:
    if len(buf) < _HEAD.size:
        raise FormatError("truncated dataset header", 0)
    magic, version, d_s, d_e, d_a, d_w, count = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    dims = FeatureDims(d_s, d_e, d_a, d_w)
    if expected_dims is not None:
        for i, (name, got, want) in enumerate(zip(FeatureDims._fields, dims, expected_dims)):
            if got != want:
                raise FormatError(f"dimension mismatch: file declares {name}={got}, config expects {want}", 6 + 2 * i)
    dt = frame_dtype(dims)
    off = _HEAD.size
    videos = []
    for _ in range(count):
        if off + 2 > len(buf):
            raise FormatError("truncated video header", off)
        (id_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + id_len + 4 > len(buf):
            raise FormatError("truncated video header", off)
        try:
            vid = buf[off : off + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("video id is not UTF-8", off) from exc
        off += id_len
        (T,) = struct.unpack_from("<I", buf, off)
        off += 4
        nbytes = T * dt.itemsize
        if off + nbytes > len(buf):
            raise FormatError(f"truncated frame payload for video {vid!r}", off)
        rec = np.frombuffer(buf, dtype=dt, count=T, offset=off)
        off += nbytes
        expr = rec["expr"].astype(np.int16)
        expr_labels = None if len(expr) and (expr == EXPR_ABSENT).all() else np.where(expr == EXPR_ABSENT, -1, expr).astype(np.int16)
        videos.append(
            Video(
                video_id=vid,
                static=rec["static"].copy(),
                expr_emb=rec["expr_emb"].copy(),
                audio=rec["audio"].copy(),
                word=rec["word"].copy(),
                expr_labels=expr_labels,
                au_labels=_unpack_au(rec["au"]),
            )
        )
    if off != len(buf):
        raise FormatError("trailing bytes after last video", off)
    return videos


def read_header_dims(path) -> FeatureDims:
    buf = Path(path).read_bytes()[: _HEAD.size]
    if len(buf) < _HEAD.size:
        raise FormatError("truncated dataset header", 0)
    magic, _, d_s, d_e, d_a, d_w, _ = _HEAD.unpack(buf)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", 0)
    return FeatureDims(d_s, d_e, d_a, d_w)


def save_dataset(videos: list[Video], path, dims: FeatureDims | None = None) -> None:
    atomic_write_bytes(path, encode_dataset(videos, dims))


def load_dataset(path, expected_dims: FeatureDims | None = None) -> list[Video]:
    return decode_dataset(Path(path).read_bytes(), expected_dims)
