"""
On-disk formats for frames and waveforms.

PFVF frame container (little-endian):
    magic  4s   b"PFVF"
    version u16
    T, H, W, C  u32 x 4
    fps    f32
    payload  T*H*W*C bytes, row-major u8 RGB

PFWV waveform container (little-endian):
    magic  4s   b"PFWV"
    version u16
    sample_rate f64
    n      u64
    samples  f64[n]
    mask   ceil(n/8) bytes, bit i = sample i usable (LSB first)

Waveforms also round-trip through CSV (``t_seconds,value,quality``), and a
folder of binary PPM (P6) images can be imported as a FrameTensor.
"""

import glob
import os
import struct

import numpy as np
import pandas as pd

from pulseface.errors import FormatError, RangeError, SignalLengthError
from pulseface.preprocess import FrameTensor
from pulseface.signal_core import Waveform
from pulseface.tools.log import log

_STAGE = "IO"

FRAME_MAGIC = b"PFVF"
WAVE_MAGIC = b"PFWV"
CONTAINER_VERSION = 1

_FRAME_HEADER = struct.Struct("<4sHIIIIf")
_WAVE_HEADER = struct.Struct("<4sHdQ")


def _check_magic_version(data: bytes, magic: bytes, header: struct.Struct, what: str) -> tuple:
    if len(data) < header.size:
        if len(data) >= 4 and data[:4] != magic:
            raise FormatError(f"bad {what} magic {data[:4]!r}", 0)
        raise FormatError(f"truncated {what} header ({len(data)} of {header.size} bytes)", len(data))
    fields = header.unpack_from(data, 0)
    if fields[0] != magic:
        raise FormatError(f"bad {what} magic {fields[0]!r}, expected {magic!r}", 0)
    if fields[1] != CONTAINER_VERSION:
        raise FormatError(f"unsupported {what} version {fields[1]}", 4)
    return fields


def _write_atomic(path: str, payload: bytes) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)


def frames_to_u8(frames: FrameTensor | np.ndarray) -> np.ndarray:
    """Quantize [0, 1] frames to u8 by rounding."""
    data = frames.data if isinstance(frames, FrameTensor) else np.asarray(frames)
    if data.dtype == np.uint8:
        return data
    return np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_frames(data: np.ndarray, fps: float) -> FrameTensor:
    return FrameTensor(data.astype(np.float64) / 255.0, fps)


def encode_frames(data: np.ndarray, fps: float) -> bytes:
    if data.dtype != np.uint8 or data.ndim != 4:
        raise RangeError(f"frame payload must be a 4-D u8 array, got {data.dtype} {data.shape}")
    header = _FRAME_HEADER.pack(FRAME_MAGIC, CONTAINER_VERSION, *data.shape, fps)
    return header + np.ascontiguousarray(data).tobytes()


def decode_frames(blob: bytes) -> tuple[np.ndarray, float]:
    """Parse a PFVF blob into a T x H x W x C u8 array and its fps."""
    _, _, t, h, w, c, fps = _check_magic_version(blob, FRAME_MAGIC, _FRAME_HEADER, "frame container")
    expected = _FRAME_HEADER.size + t * h * w * c
    if len(blob) < expected:
        raise FormatError(
            f"truncated frame payload: expected {expected - _FRAME_HEADER.size} bytes", len(blob)
        )
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after frame payload", expected)
    data = np.frombuffer(blob, dtype=np.uint8, offset=_FRAME_HEADER.size).reshape(t, h, w, c)
    return data.copy(), float(fps)


def write_frames(path: str, frames: FrameTensor | np.ndarray, fps: float | None = None) -> None:
    if fps is None:
        if not isinstance(frames, FrameTensor):
            raise RangeError("fps is required when writing a raw array")
        fps = frames.fps
    _write_atomic(path, encode_frames(frames_to_u8(frames), fps))


def read_frames(path: str) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        return decode_frames(f.read())


def read_frame_tensor(path: str) -> FrameTensor:
    data, fps = read_frames(path)
    return u8_to_frames(data, fps)


def encode_waveform(w: Waveform) -> bytes:
    n = len(w)
    header = _WAVE_HEADER.pack(WAVE_MAGIC, CONTAINER_VERSION, w.sample_rate_hz, n)
    samples = w.samples.astype("<f8").tobytes()
    mask = np.packbits(w.quality_mask, bitorder="little").tobytes()
    return header + samples + mask


def decode_waveform(blob: bytes) -> Waveform:
    _, _, rate, n = _check_magic_version(blob, WAVE_MAGIC, _WAVE_HEADER, "waveform container")
    samples_end = _WAVE_HEADER.size + 8 * n
    expected = samples_end + (n + 7) // 8
    if len(blob) < expected:
        raise FormatError(f"truncated waveform payload: expected {expected} bytes", len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after waveform payload", expected)
    samples = np.frombuffer(blob, dtype="<f8", count=n, offset=_WAVE_HEADER.size)
    bits = np.frombuffer(blob, dtype=np.uint8, offset=samples_end)
    mask = np.unpackbits(bits, count=n, bitorder="little").astype(bool)
    try:
        return Waveform(samples, rate, mask)
    except (RangeError, SignalLengthError) as exc:
        raise FormatError(f"invalid waveform fields: {exc}", 6) from exc


def write_waveform(path: str, w: Waveform) -> None:
    _write_atomic(path, encode_waveform(w))


def read_waveform(path: str) -> Waveform:
    with open(path, "rb") as f:
        return decode_waveform(f.read())


def write_waveform_csv(path: str, w: Waveform) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame(
        {
            "t_seconds": w.times(),
            "value": w.samples,
            "quality": w.quality_mask.astype(int),
        }
    )
    frame.to_csv(path, index=False)


def read_waveform_csv(path: str) -> Waveform:
    """Read a ``t_seconds,value,quality`` CSV; the rate comes from the first time step."""
    frame = pd.read_csv(path)
    missing = {"t_seconds", "value", "quality"} - set(frame.columns)
    if missing:
        raise RangeError(f"{path}: missing CSV columns {sorted(missing)}")
    if len(frame) < 2:
        raise SignalLengthError(f"{path}: need at least 2 rows to infer the sample rate")
    t = frame["t_seconds"].to_numpy(dtype=np.float64)
    rate = round(1.0 / (t[1] - t[0]), 6)
    return Waveform(
        frame["value"].to_numpy(dtype=np.float64), rate, frame["quality"].to_numpy() != 0
    )


def _ppm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 PPM (maxval <= 255) into an H x W x 3 u8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    (magic, width, height, maxval), offset = _ppm_tokens(blob, 4)
    if magic != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {magic!r})", 0)
    width, height, maxval = int(width), int(height), int(maxval)
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}", offset)
    expected = offset + width * height * 3
    if len(blob) < expected:
        raise FormatError(f"{path}: truncated PPM raster", len(blob))
    raster = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=offset)
    raster = raster.reshape(height, width, 3)
    if maxval != 255:
        raster = np.round(raster.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return raster.copy()


def write_ppm(path: str, frame: np.ndarray) -> None:
    frame = frames_to_u8(frame)
    height, width = frame.shape[:2]
    _write_atomic(path, f"P6\n{width} {height}\n255\n".encode("ascii") + frame.tobytes())


def import_ppm_sequence(folder: str, fps: float) -> FrameTensor:
    """Load every ``*.ppm`` in ``folder`` (sorted by name) as one video."""
    paths = sorted(glob.glob(os.path.join(folder, "*.ppm")))
    if len(paths) < 2:
        raise SignalLengthError(f"{folder}: need at least 2 PPM frames, found {len(paths)}")
    frames = [read_ppm(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{folder}: PPM frames differ in size {sorted(shapes)}", 0)
    log(_STAGE, f"Imported {len(frames)} PPM frames from {folder}")
    return u8_to_frames(np.stack(frames), fps)
