"""
PFCK checkpoint container.

Layout (little-endian):
    magic b"PFCK" | u16 version | 32-byte SHA-256 of the config JSON |
    u32 config length | config JSON (UTF-8) | u32 parameter count |
    per parameter: u16 name length | name | u8 ndim | u32 dims[ndim] | f64 data
"""

import hashlib
import json
import os
import struct

import numpy as np

from pulseface.errors import FormatError
from pulseface.tools.digest import canonical_json

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1

_HEAD = struct.Struct("<4sH")


def encode_checkpoint(params: dict[str, np.ndarray], config: dict) -> bytes:
    config_bytes = canonical_json(config).encode("utf-8")
    parts = [
        _HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION),
        hashlib.sha256(config_bytes).digest(),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(params)),
    ]
    for name in sorted(params):
        values = np.asarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(np.ascontiguousarray(values).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise FormatError(f"checkpoint truncated while reading {what}", len(self.blob))
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    reader = _Reader(blob)
    magic, version = reader.unpack("<4sH", "header")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)

    digest = reader.take(32, "config digest")
    (config_len,) = reader.unpack("<I", "config length")
    config_offset = reader.offset
    config_bytes = reader.take(config_len, "config")
    if hashlib.sha256(config_bytes).digest() != digest:
        raise FormatError("config digest mismatch", config_offset)
    config = json.loads(config_bytes.decode("utf-8"))

    (count,) = reader.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "ndim")
        shape = reader.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape, dtype=np.int64))
        data = reader.take(8 * size, f"{name} data")
        params[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)

    if reader.offset != len(blob):
        raise FormatError(f"{len(blob) - reader.offset} trailing byte(s) after checkpoint", reader.offset)
    return params, config


def save_checkpoint(path: str, params: dict[str, np.ndarray], config: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_checkpoint(params, config))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
