"""
Color-projection pulse extractors (POS and CHROM).

Both work on the spatial-mean RGB trace of an aligned face crop, normalize
each channel by its mean inside a sliding 1.6 s window, project onto a fixed
plane, and stitch the windows back together with Hann-weighted overlap-add.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from pulseface.errors import NoSignalError, RangeError, ShapeError, SignalLengthError
from pulseface.preprocess import FrameTensor
from pulseface.signal_core import Waveform

WINDOW_S = 1.6
POS_PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RoiTrace:
    """Per-frame spatial mean RGB (T x 3) of a face crop."""

    mean_rgb: np.ndarray
    fps: float

    def __post_init__(self):
        rgb = np.asarray(self.mean_rgb, dtype=np.float64)
        if rgb.ndim != 2 or rgb.shape[1] != 3 or rgb.shape[0] < 2:
            raise ShapeError("RoiTrace", rgb.shape, ("T>=2", 3))
        if not np.isfinite(rgb).all() or rgb.min() < 0.0 or rgb.max() > 1.0:
            raise RangeError("ROI trace values must be finite and lie in [0, 1]")
        if not self.fps > 0:
            raise RangeError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "mean_rgb", rgb)

    def __len__(self) -> int:
        return self.mean_rgb.shape[0]


def roi_trace(clip: FrameTensor) -> RoiTrace:
    return RoiTrace(clip.data.mean(axis=(1, 2)), clip.fps)


def _pos_window(cn: np.ndarray) -> np.ndarray:
    s = cn @ POS_PROJECTION.T
    std1 = s[:, 1].std()
    alpha = s[:, 0].std() / std1 if std1 > 0 else 0.0
    return s[:, 0] + alpha * s[:, 1]


def _chrom_window(cn: np.ndarray) -> np.ndarray:
    x = 3.0 * cn[:, 0] - 2.0 * cn[:, 1]
    y = 1.5 * cn[:, 0] + cn[:, 1] - 1.5 * cn[:, 2]
    std_y = y.std()
    alpha = x.std() / std_y if std_y > 0 else 0.0
    return x - alpha * y


def _overlap_add(trace: RoiTrace, project: Callable[[np.ndarray], np.ndarray], name: str) -> Waveform:
    rgb = trace.mean_rgb
    n = len(trace)
    size = int(round(WINDOW_S * trace.fps))
    if n < size:
        raise SignalLengthError(f"{name} needs at least {size} frames ({WINDOW_S} s), got {n}")
    if rgb.std(axis=0).max() < 1e-12:
        raise NoSignalError(f"{name}: ROI trace has zero variance")

    taper = np.hanning(size + 2)[1:-1]
    out = np.zeros(n)
    weight = np.zeros(n)
    for start in range(n - size + 1):
        block = rgb[start : start + size]
        means = block.mean(axis=0)
        if (means <= 0).any():
            raise NoSignalError(f"{name}: a color channel is zero over a window")
        h = project(block / means)
        out[start : start + size] += taper * (h - h.mean())
        weight[start : start + size] += taper
    return Waveform(out / weight, trace.fps)


def pos(trace: RoiTrace) -> Waveform:
    """Plane-orthogonal-to-skin projection; output has one sample per frame."""
    return _overlap_add(trace, _pos_window, "POS")


def chrom(trace: RoiTrace) -> Waveform:
    """Chrominance projection (3R-2G, 1.5R+G-1.5B) with the std-ratio combination."""
    return _overlap_add(trace, _chrom_window, "CHROM")


METHODS = {"pos": pos, "chrom": chrom}
