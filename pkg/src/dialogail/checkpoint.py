"""Versioned binary checkpoint container.

Layout (little-endian):

    magic b"EGAIL" | u8 version
    u32 len | config JSON (canonical: sorted keys, compact separators)
    u32 len | state JSON  (trainer state, RNG stream states, counters)
    u32 len | vocab JSON  (token list)
    u32 n_segments, then per segment (sorted by name):
        u16 name len | name utf-8
        u8 dtype code (0=f32, 1=f64) | u8 ndim | u32 dims...
        u64 payload bytes | payload | u32 crc32(payload)

Saving is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"EGAIL"
VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    config: dict
    state: dict
    vocab_tokens: list[str]
    segments: dict[str, np.ndarray] = field(default_factory=dict)

    def config_json(self) -> str:
        return json.dumps(self.config, sort_keys=True, separators=(",", ":"))


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<B", VERSION)]
    out.append(_pack_json(ckpt.config))
    out.append(_pack_json(ckpt.state))
    out.append(_pack_json(ckpt.vocab_tokens))
    names = sorted(ckpt.segments)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.segments[name])
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"segment '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
        out.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes: not an EGAIL checkpoint")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_json():
        (n,) = r.unpack("<I")
        try:
            return json.loads(r.take(n).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt JSON block: {exc}") from exc

    config = read_json()
    state = read_json()
    vocab_tokens = read_json()
    (n_segments,) = r.unpack("<I")
    segments: dict[str, np.ndarray] = {}
    for _ in range(n_segments):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_code, ndim = r.unpack("<BB")
        if dtype_code not in _DTYPES:
            raise CheckpointError(f"segment '{name}': unknown dtype code {dtype_code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        payload = r.take(nbytes)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"segment '{name}': checksum mismatch (corrupted checkpoint)")
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype_code]).reshape(shape).copy()
        segments[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config=config, state=state, vocab_tokens=vocab_tokens, segments=segments)


def save(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
