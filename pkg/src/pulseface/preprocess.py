"""
Video preprocessing: 2 s clip segmentation, detector-driven face alignment
with 90 degree rotation search and the 30-frame retry state machine,
crop/resize, and temporal difference normalization.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Protocol

import numpy as np
from scipy import ndimage

from pulseface.errors import RangeError, ShapeError
from pulseface.tools.log import log, warn

_STAGE = "Preprocess"

CLIP_FRAMES = 60
RETRY_FRAMES = 30
TARGET_FPS = 30.0
ROTATION_BINS = (0, 90, 180, 270)
DIFF_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class FrameTensor:
    """T x H x W x 3 video in [0, 1] with its frame rate. Treat ``data`` as read-only."""

    data: np.ndarray
    fps: float = TARGET_FPS

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ShapeError("FrameTensor", data.shape, ("T", "H", "W", 3))
        if data.shape[0] < 2:
            raise ShapeError("FrameTensor needs at least 2 frames", data.shape)
        if not np.isfinite(data).all():
            raise RangeError("frame values must be finite")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise RangeError("frame values must lie in [0, 1]")
        if not self.fps > 0:
            raise RangeError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "fps", float(self.fps))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


class BBox(NamedTuple):
    """Axis-aligned box in pixel coordinates, half-open on the far edges."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    def clamp(self, height: int, width: int) -> "BBox":
        return BBox(
            min(max(self.x0, 0), width),
            min(max(self.y0, 0), height),
            min(max(self.x1, 0), width),
            min(max(self.y1, 0), height),
        )

    def iou(self, other: "BBox") -> float:
        inter = BBox(
            max(self.x0, other.x0),
            max(self.y0, other.y0),
            min(self.x1, other.x1),
            min(self.y1, other.y1),
        )
        if inter.width <= 0 or inter.height <= 0:
            return 0.0
        union = self.area + other.area - inter.area
        return inter.area / union if union else 0.0


class FaceDetector(Protocol):
    def detect(self, frame: np.ndarray) -> BBox | None:
        """Return the face box inside ``frame`` (H x W x 3) or None."""
        ...


@dataclass(frozen=True)
class MarkerFaceDetector:
    """
    Detector for the synthetic corpus faces.

    Skin pixels are found by their warm chroma (R > G > B with a minimum
    red-blue gap). A face only counts as detected when the dark forehead
    marker sits in the top quarter of the box, so rotated faces fail exactly
    like an upright-trained detector does.
    """

    skin_chroma: float = 0.08
    min_face_fraction: float = 0.03
    min_line_pixels: int = 2
    marker_level: float = 0.2
    min_marker_pixels: int = 4

    def detect(self, frame: np.ndarray) -> BBox | None:
        red, green, blue = frame[..., 0], frame[..., 1], frame[..., 2]
        skin = (red - blue > self.skin_chroma) & (red > green) & (green > blue)
        if skin.sum() < self.min_face_fraction * skin.size:
            return None

        rows = np.flatnonzero(skin.sum(axis=1) >= self.min_line_pixels)
        cols = np.flatnonzero(skin.sum(axis=0) >= self.min_line_pixels)
        if rows.size == 0 or cols.size == 0:
            return None
        bbox = BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)

        inside = frame[bbox.y0 : bbox.y1, bbox.x0 : bbox.x1]
        ys, xs = np.nonzero(inside.max(axis=-1) < self.marker_level)
        if ys.size < self.min_marker_pixels:
            return None
        marker_row = (ys.mean() + 0.5) / bbox.height
        marker_col = (xs.mean() + 0.5) / bbox.width
        if marker_row >= 0.25 or abs(marker_col - 0.5) > 0.25:
            return None
        return bbox


@dataclass(frozen=True)
class AlignmentState:
    current_bbox: BBox | None = None
    current_rotation_deg: int = 0
    frames_consumed: int = 0

    def __post_init__(self):
        if self.current_rotation_deg not in ROTATION_BINS:
            raise RangeError(f"rotation must be one of {ROTATION_BINS}, got {self.current_rotation_deg}")


@dataclass(frozen=True)
class SkipRecord:
    clip_id: str
    reason: str
    frame_offset: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class AlignResult:
    clip: FrameTensor | None
    state: AlignmentState
    bbox: BBox | None
    rotation_deg: int | None
    attempts: tuple[int, ...]
    anchors_inspected: int
    advance: int
    skip: SkipRecord | None = None


@dataclass(frozen=True, eq=False)
class AlignedSegment:
    index: int
    start_frame: int
    rotation_deg: int
    bbox: BBox
    clip: FrameTensor


@dataclass(eq=False)
class VideoAlignment:
    segments: list[AlignedSegment] = field(default_factory=list)
    skips: list[SkipRecord] = field(default_factory=list)
    anchors_inspected: int = 0


class SkipLog:
    """Append-only JSON-lines log of clips the aligner could not use."""

    def __init__(self, path: str):
        self.path = path

    def append(self, records: list[SkipRecord]) -> None:
        if not records:
            return
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.to_dict()) + "\n")

    def read(self) -> list[SkipRecord]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, "r", encoding="utf-8") as f:
            return [SkipRecord(**json.loads(line)) for line in f if line.strip()]


def rotate_frames(data: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate frames counter-clockwise by ``quarter_turns`` x 90 degrees (view, no copy)."""
    axes = (1, 2) if data.ndim == 4 else (0, 1)
    return np.rot90(data, k=quarter_turns % 4, axes=axes)


def rotate_bbox(bbox: BBox, quarter_turns: int, frame_shape: tuple[int, int]) -> BBox:
    """Map ``bbox`` through the same rotation ``rotate_frames`` applies to a frame of ``frame_shape``."""
    height, width = frame_shape
    for _ in range(quarter_turns % 4):
        bbox = BBox(bbox.y0, width - bbox.x1, bbox.y1, width - bbox.x0)
        height, width = width, height
    return bbox


def crop_resize(frames: np.ndarray, bbox: BBox, size: int) -> np.ndarray:
    """Crop ``frames`` (T x H x W x 3) to ``bbox`` clamped to the frame, then bilinear-resize to size x size."""
    height, width = frames.shape[1:3]
    box = bbox.clamp(height, width)
    if box.width <= 0 or box.height <= 0:
        raise RangeError(f"bounding box {bbox} does not overlap a {height}x{width} frame")
    crop = frames[:, box.y0 : box.y1, box.x0 : box.x1, :]
    zoom = (1.0, size / box.height, size / box.width, 1.0)
    resized = ndimage.zoom(crop, zoom, order=1, mode="nearest")
    return np.clip(resized, 0.0, 1.0)


def _resample_to_target_fps(video: FrameTensor) -> FrameTensor:
    if math.isclose(video.fps, TARGET_FPS):
        return video
    n_out = int(math.floor(video.n_frames * TARGET_FPS / video.fps))
    indices = np.round(np.arange(n_out) * video.fps / TARGET_FPS).astype(int)
    indices = np.clip(indices, 0, video.n_frames - 1)
    log(_STAGE, f"Resampling {video.fps:g} fps video to {TARGET_FPS:g} fps ({n_out} frames)")
    return FrameTensor(video.data[indices], TARGET_FPS)


def segment_clips(video: FrameTensor) -> list[FrameTensor]:
    """
    Split a video into consecutive, non-overlapping 60-frame clips.

    Videos at other frame rates are first brought to 30 fps by nearest-frame
    selection. A trailing remainder shorter than 60 frames is dropped.
    """
    video = _resample_to_target_fps(video)
    n_clips = video.n_frames // CLIP_FRAMES
    return [
        FrameTensor(video.data[i * CLIP_FRAMES : (i + 1) * CLIP_FRAMES], video.fps)
        for i in range(n_clips)
    ]


def _search_order(start_rotation: int) -> list[int]:
    start = ROTATION_BINS.index(start_rotation)
    return [ROTATION_BINS[(start + i) % 4] for i in range(4)]


def _search_rotations(
    frame: np.ndarray, detector: FaceDetector, start_rotation: int
) -> tuple[int | None, BBox | None, tuple[int, ...]]:
    attempts = []
    for rotation in _search_order(start_rotation):
        attempts.append(rotation)
        bbox = detector.detect(rotate_frames(frame, rotation // 90))
        if bbox is not None:
            return rotation, bbox, tuple(attempts)
    return None, None, tuple(attempts)


def align_clip(
    clip: FrameTensor,
    detector: FaceDetector,
    state: AlignmentState,
    clip_id: str = "",
    crop_size: int = 128,
) -> AlignResult:
    """
    Align one 60-frame clip.

    Detection runs on the first frame at the state's rotation, then at the
    remaining rotations in ascending order. The box found is applied to every
    frame. A re-check at frame 30 confirms the box is still valid.

    Parameters
    ----------
    clip : FrameTensor
        Exactly 60 frames.
    detector : FaceDetector
        Face detector for upright faces.
    state : AlignmentState
        Stream state; ``frames_consumed`` is the clip's offset in the video.
    clip_id : str
        Identifier used in skip records.
    crop_size : int
        Output side length in pixels.

    Returns
    -------
    AlignResult
        The cropped clip (or None with a skip record) and the updated state.
        ``advance`` is 30 when the first frame had no face (the caller
        retries half a clip later) and 60 otherwise.
    """
    if clip.n_frames != CLIP_FRAMES:
        raise ShapeError("align_clip", clip.data.shape, (CLIP_FRAMES, "H", "W", 3))

    rotation, bbox, attempts = _search_rotations(
        clip.data[0], detector, state.current_rotation_deg
    )
    if bbox is None:
        skip = SkipRecord(clip_id, "no-face", state.frames_consumed)
        new_state = replace(
            state, current_bbox=None, frames_consumed=state.frames_consumed + RETRY_FRAMES
        )
        return AlignResult(None, new_state, None, None, attempts, 1, RETRY_FRAMES, skip)

    quarter_turns = rotation // 90
    recheck = detector.detect(rotate_frames(clip.data[RETRY_FRAMES], quarter_turns))
    if recheck is None:
        skip = SkipRecord(clip_id, "face-lost", state.frames_consumed + RETRY_FRAMES)
        new_state = AlignmentState(None, rotation, state.frames_consumed + CLIP_FRAMES)
        return AlignResult(None, new_state, bbox, rotation, attempts, 2, CLIP_FRAMES, skip)

    cropped = crop_resize(rotate_frames(clip.data, quarter_turns), bbox, crop_size)
    new_state = AlignmentState(recheck, rotation, state.frames_consumed + CLIP_FRAMES)
    return AlignResult(
        FrameTensor(cropped, clip.fps), new_state, bbox, rotation, attempts, 2, CLIP_FRAMES
    )


def align_video(
    video: FrameTensor,
    detector: FaceDetector,
    clip_prefix: str = "clip",
    crop_size: int = 128,
) -> VideoAlignment:
    """
    Run the alignment state machine over a whole recording.

    Windows start at frame 0; after a failed anchor the next window starts 30
    frames later (the window start is realigned to the recovery frame).
    Every anchor frame is inspected at most once.
    """
    video = _resample_to_target_fps(video)
    result = VideoAlignment()
    state = AlignmentState()
    position = 0
    while position + CLIP_FRAMES <= video.n_frames:
        clip = FrameTensor(video.data[position : position + CLIP_FRAMES], video.fps)
        state = replace(state, frames_consumed=position)
        outcome = align_clip(
            clip, detector, state, clip_id=f"{clip_prefix}_f{position:06d}", crop_size=crop_size
        )
        result.anchors_inspected += outcome.anchors_inspected
        if outcome.clip is not None:
            result.segments.append(
                AlignedSegment(
                    len(result.segments), position, outcome.rotation_deg, outcome.bbox, outcome.clip
                )
            )
        else:
            result.skips.append(outcome.skip)
        state = outcome.state
        position += outcome.advance

    if result.skips:
        warn(_STAGE, f"{clip_prefix}: {len(result.skips)} window(s) skipped by alignment")
    return result


def diff_normalize(clip: FrameTensor | np.ndarray) -> np.ndarray:
    """
    Consecutive-frame differences divided by their global standard deviation.

    Returns an array with one frame fewer than the input.
    """
    data = clip.data if isinstance(clip, FrameTensor) else np.asarray(clip, dtype=np.float64)
    diff = np.diff(data, axis=0)
    return diff / (diff.std() + DIFF_EPS)


def time_reverse(clip: FrameTensor) -> FrameTensor:
    return FrameTensor(np.ascontiguousarray(clip.data[::-1]), clip.fps)


def prepare_model_input(clip: FrameTensor) -> np.ndarray:
    """Diff-normalize, pad with a trailing zero frame back to T frames, and move channels first (C x T x H x W)."""
    normalized = diff_normalize(clip)
    padded = np.concatenate([normalized, np.zeros_like(normalized[:1])], axis=0)
    return np.ascontiguousarray(padded.transpose(3, 0, 1, 2))
