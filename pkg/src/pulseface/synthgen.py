"""
Deterministic synthetic corpus.

Each recording is an elliptical "face" on a gray background whose skin pixels
carry a pulse, a slow illumination drift and sensor noise, plus a paired
60 Hz oximeter-style PPG. The red/blue pulsatile amplitude ratio encodes SpO2
the way a ratio-of-ratios oximeter reads it, and a dark forehead bar marks
the upright orientation.

All randomness derives from ``SeedSequence([seed, subject, clip])``, so a
recording is identical whether it is generated alone, serially or in a pool.
"""

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pulseface.containers import frames_to_u8, write_frames, write_waveform
from pulseface.errors import RangeError
from pulseface.manifest import (
    DEFAULT_SPLIT_FRACTIONS,
    ClipEntry,
    Manifest,
    SubjectEntry,
    WindowLabel,
    assign_splits,
)
from pulseface.preprocess import BBox, FrameTensor, rotate_bbox, rotate_frames
from pulseface.signal_core import BandpassSpec, Waveform, bandpass
from pulseface.tools.log import log

_STAGE = "Synth"

WINDOW_S = 2.0
BLUE_DEPTH_RATIO = 0.6
SKIN_TONE = np.array([0.75, 0.55, 0.45])
BACKGROUND_LEVEL = 0.3
MARKER_LEVEL = 0.05
RESPIRATION_HZ = 0.25
ILLUMINATION_HZ = 0.05
HR_DRIFT_PERIOD_S = 20.0
RENDER_CHUNK = 60


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_subjects: int = 10
    clips_per_subject: int = 1
    clip_seconds: float = 30.0
    fps: float = 30.0
    frame_size: tuple[int, int] = (64, 64)
    hr_range_bpm: tuple[float, float] = (79.0, 174.0)
    spo2_range_pct: tuple[float, float] = (87.0, 99.0)
    artifact_rate: float = 0.0
    rotation_bins: tuple[int, ...] = (0, 90, 180, 270)
    illumination_drift_amp: float = 0.01
    pulse_amplitude: float = 0.02
    noise_sigma: float = 0.002
    hr_drift_bpm: float = 2.0
    ppg_rate_hz: float = 60.0
    ppg_noise: float = 0.02
    split_fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS
    preset: str = "clean"

    def __post_init__(self):
        # TOML hands back lists; keep the frozen config hashable
        for name in ("frame_size", "hr_range_bpm", "spo2_range_pct", "rotation_bins", "split_fractions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_subjects < 1 or self.clips_per_subject < 1:
            raise RangeError("n_subjects and clips_per_subject must be >= 1")
        if not self.fps > 0 or not self.ppg_rate_hz > 0:
            raise RangeError("fps and ppg_rate_hz must be positive")
        if self.clip_seconds < WINDOW_S:
            raise RangeError(f"clip_seconds must be >= {WINDOW_S}")
        for name in ("hr_range_bpm", "spo2_range_pct"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise RangeError(f"{name} must satisfy min < max, got {(lo, hi)}")
        if not 0.0 <= self.artifact_rate <= 1.0:
            raise RangeError(f"artifact_rate must lie in [0, 1], got {self.artifact_rate}")
        if not self.rotation_bins or any(r not in (0, 90, 180, 270) for r in self.rotation_bins):
            raise RangeError(f"rotation_bins must be drawn from 0/90/180/270, got {self.rotation_bins}")
        height, width = self.frame_size
        if height != width or height < 16:
            raise RangeError(f"frame_size must be square and >= 16 px, got {self.frame_size}")
        if self.pulse_amplitude <= 0 or self.noise_sigma < 0 or self.hr_drift_bpm < 0:
            raise RangeError("pulse_amplitude must be positive; noise_sigma and hr_drift_bpm non-negative")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "SynthConfig":
        if name not in PRESETS:
            raise RangeError(f"unknown synth preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(PRESETS[name], **overrides)

    @property
    def n_frames(self) -> int:
        return int(round(self.clip_seconds * self.fps))

    @property
    def n_windows(self) -> int:
        return int(math.floor(self.clip_seconds / WINDOW_S + 1e-9))


PRESETS = {
    "clean": SynthConfig(),
    "hard": SynthConfig(
        pulse_amplitude=0.01,
        noise_sigma=0.01,
        illumination_drift_amp=0.05,
        artifact_rate=0.2,
        preset="hard",
    ),
}


@dataclass(frozen=True)
class CorruptionInterval:
    start_s: float
    end_s: float
    kind: str


@dataclass(frozen=True, eq=False)
class SynthClip:
    clip_id: str
    subject_id: str
    frames: FrameTensor
    ppg_ref: Waveform
    ppg_clean: Waveform
    hr_series_bpm: np.ndarray
    spo2_series_pct: np.ndarray
    true_bbox: np.ndarray
    orientation_deg: int
    corruption: list[CorruptionInterval] = field(default_factory=list)


def pulse_template(phase) -> np.ndarray:
    """Fundamental plus a second harmonic; one systolic peak per beat, positively skewed."""
    phase = np.asarray(phase, dtype=np.float64)
    return np.sin(phase) - 0.25 * np.cos(2.0 * phase)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(keys)))


def _heart_phase(t: np.ndarray, hr0: float, drift: float, drift_phase: float, phase0: float) -> np.ndarray:
    """Closed-form integral of 2*pi*hr(t)/60 for hr(t) = hr0 + drift*sin(2*pi*t/P + drift_phase)."""
    omega = 2.0 * math.pi / HR_DRIFT_PERIOD_S
    integral = hr0 * t - drift / omega * (np.cos(omega * t + drift_phase) - math.cos(drift_phase))
    return phase0 + 2.0 * math.pi * integral / 60.0


def _heart_rate(t: np.ndarray, hr0: float, drift: float, drift_phase: float) -> np.ndarray:
    return hr0 + drift * np.sin(2.0 * math.pi * t / HR_DRIFT_PERIOD_S + drift_phase)


def spo2_to_ratio(spo2_pct) -> np.ndarray:
    """Red/blue modulation-depth ratio for a saturation value."""
    return (110.0 - np.asarray(spo2_pct, dtype=np.float64)) / 25.0


def ratio_to_spo2(ratio) -> np.ndarray:
    return 110.0 - 25.0 * np.asarray(ratio, dtype=np.float64)


def _face_geometry(size: int, rng: np.random.Generator) -> tuple[float, float, float, float]:
    cx = size / 2.0 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2.0 + rng.uniform(-0.05, 0.05) * size
    return cx, cy, 0.27 * size, 0.36 * size


def _face_masks(size: int, cx: float, cy: float, rx: float, ry: float) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    marker = (
        face
        & (yy >= cy - 0.72 * ry)
        & (yy <= cy - 0.52 * ry)
        & (np.abs(xx - cx) <= 0.5 * rx)
    )
    return face & ~marker, marker


def _mask_bbox(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def inject_artifacts(
    w: Waveform, rate: float, seed: int
) -> tuple[Waveform, list[CorruptionInterval]]:
    """
    Corrupt a fraction ``rate`` of ``w`` with motion-like artifacts.

    Intervals of 0.5-20 s are placed in still-clean stretches until the target
    fraction is covered (the last interval may be shorter). Each interval is a
    high-amplitude noise burst, a run of baseline jumps, or a flat line. The
    quality mask is left untouched; the returned intervals are the truth.
    """
    if not 0.0 <= rate <= 1.0:
        raise RangeError(f"artifact rate must lie in [0, 1], got {rate}")
    n = len(w)
    target = int(round(rate * n))
    if target == 0:
        return w, []

    rng = _rng(seed, 0xA57)
    fs = w.sample_rate_hz
    samples = w.samples.copy()
    scale = float(w.samples.std()) or 1.0
    covered = np.zeros(n, dtype=bool)
    intervals = []
    while covered.sum() < target:
        remaining = target - int(covered.sum())
        length = min(int(round(rng.uniform(0.5, 20.0) * fs)), remaining)
        padded = np.concatenate([[True], covered, [True]])
        edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
        runs = [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]
        fitting = [(a, b) for a, b in runs if b - a >= length]
        if fitting:
            a, b = fitting[int(rng.integers(len(fitting)))]
        else:
            a, b = max(runs, key=lambda r: r[1] - r[0])
            length = b - a
        start = a + int(rng.integers(b - a - length + 1))
        stop = start + length
        kind = ("burst", "jump", "flat")[int(rng.integers(3))]
        samples[start:stop] = _artifact(kind, samples[start:stop], scale, fs, rng)
        covered[start:stop] = True
        intervals.append(CorruptionInterval(start / fs, stop / fs, kind))

    intervals.sort(key=lambda i: i.start_s)
    return w.replace(samples=samples), intervals


def _artifact(kind: str, segment: np.ndarray, scale: float, fs: float, rng) -> np.ndarray:
    length = segment.size
    if kind == "burst":
        return segment.mean() + rng.normal(0.0, 3.0 * scale, length)
    if kind == "jump":
        levels = np.zeros(length)
        pos = 0
        while pos < length:
            hold = max(1, int(round(rng.uniform(0.3, 1.0) * fs)))
            levels[pos : pos + hold] = rng.normal(0.0, 3.0 * scale)
            pos += hold
        return 0.3 * segment + levels
    return np.full(length, segment[0])


def generate_clip(
    cfg: SynthConfig, subject: int, index: int, orientation_deg: int | None = None
) -> SynthClip:
    """Render one recording of ``cfg.clip_seconds`` for ``subject``."""
    subject_rng = _rng(cfg.seed, subject)
    rng = _rng(cfg.seed, subject, index)
    size = cfg.frame_size[0]

    brightness = subject_rng.uniform(0.8, 1.0)
    cx, cy, rx, ry = _face_geometry(size, subject_rng)
    skin, marker = _face_masks(size, cx, cy, rx, ry)

    hr_lo, hr_hi = cfg.hr_range_bpm
    drift = min(cfg.hr_drift_bpm, (hr_hi - hr_lo) / 2.0)
    hr0 = rng.uniform(hr_lo + drift, hr_hi - drift)
    spo2_lo, spo2_hi = cfg.spo2_range_pct
    spo2 = spo2_lo + (spo2_hi - spo2_lo) * max(rng.uniform(), rng.uniform())
    drift_phase, phase0, resp_phase, light_phase = rng.uniform(0, 2 * math.pi, 4)
    if orientation_deg is None:
        orientation_deg = int(cfg.rotation_bins[int(rng.integers(len(cfg.rotation_bins)))])
    elif orientation_deg not in (0, 90, 180, 270):
        raise RangeError(f"orientation must be one of 0/90/180/270, got {orientation_deg}")

    # oximeter PPG
    n_ppg = int(round(cfg.clip_seconds * cfg.ppg_rate_hz))
    t_ppg = np.arange(n_ppg) / cfg.ppg_rate_hz
    ppg = (
        pulse_template(_heart_phase(t_ppg, hr0, drift, drift_phase, phase0))
        + 0.1 * np.sin(2 * math.pi * RESPIRATION_HZ * t_ppg + resp_phase)
        + rng.normal(0.0, cfg.ppg_noise, n_ppg)
    )
    ppg_clean = Waveform(ppg, cfg.ppg_rate_hz)
    ppg_ref, corruption = ppg_clean, []
    if cfg.artifact_rate > 0:
        artifact_seed = int(np.random.SeedSequence([cfg.seed, subject, index]).generate_state(1)[0])
        ppg_ref, corruption = inject_artifacts(ppg_clean, cfg.artifact_rate, artifact_seed)

    # video
    n_frames = cfg.n_frames
    t_video = np.arange(n_frames) / cfg.fps
    pulse = pulse_template(_heart_phase(t_video, hr0, drift, drift_phase, phase0))
    light = 1.0 + cfg.illumination_drift_amp * np.sin(2 * math.pi * ILLUMINATION_HZ * t_video + light_phase)
    base = SKIN_TONE * brightness
    green_depth = cfg.pulse_amplitude / base[1]
    blue_depth = BLUE_DEPTH_RATIO * green_depth
    depths = np.array([float(spo2_to_ratio(spo2)) * blue_depth, green_depth, blue_depth])

    quarter_turns = (-orientation_deg // 90) % 4
    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for start in range(0, n_frames, RENDER_CHUNK):
        stop = min(start + RENDER_CHUNK, n_frames)
        count = stop - start
        gain = light[start:stop, None, None, None]
        skin_rgb = base * (1.0 + depths * pulse[start:stop, None])
        chunk = np.full((count, size, size, 3), BACKGROUND_LEVEL) * gain
        chunk[:, skin] = (skin_rgb[:, None, :] * gain[:, :, 0])
        chunk[:, marker] = MARKER_LEVEL
        chunk += rng.normal(0.0, cfg.noise_sigma, chunk.shape)
        frames[start:stop] = frames_to_u8(rotate_frames(chunk, quarter_turns))

    upright_box = _mask_bbox(skin | marker)
    stored_box = rotate_bbox(upright_box, quarter_turns, (size, size))
    true_bbox = np.tile(np.asarray(stored_box, dtype=np.int64), (n_frames, 1))

    windows = cfg.n_windows
    hr_series = np.array(
        [
            _heart_rate(t_ppg[(t_ppg >= k * WINDOW_S) & (t_ppg < (k + 1) * WINDOW_S)], hr0, drift, drift_phase).mean()
            for k in range(windows)
        ]
    )
    hr_series = np.clip(hr_series, hr_lo, hr_hi)
    return SynthClip(
        clip_id=f"s{subject:03d}_c{index:02d}",
        subject_id=f"s{subject:03d}",
        frames=FrameTensor(frames.astype(np.float64) / 255.0, cfg.fps),
        ppg_ref=ppg_ref,
        ppg_clean=ppg_clean,
        hr_series_bpm=hr_series,
        spo2_series_pct=np.full(windows, spo2),
        true_bbox=true_bbox,
        orientation_deg=orientation_deg,
        corruption=corruption,
    )


def decode_spo2(frames: FrameTensor, skin_chroma: float = 0.08) -> float:
    """
    Closed-form ratio-of-ratios decoder for clean, upright-or-rotated synthetic frames.

    Averages skin pixels per frame, band-passes each channel trace and reads
    SpO2 from the red/blue ratio of AC/DC ratios.
    """
    mean_frame = frames.data.mean(axis=0)
    red, green, blue = mean_frame[..., 0], mean_frame[..., 1], mean_frame[..., 2]
    skin = (red - blue > skin_chroma) & (red > green) & (green > blue)
    if not skin.any():
        raise RangeError("no skin pixels found")
    trace = frames.data[:, skin, :].mean(axis=1)
    dc = trace.mean(axis=0)
    ac = np.array(
        [bandpass(Waveform(trace[:, c], frames.fps), BandpassSpec()).samples.std() for c in range(3)]
    )
    ratio = (ac[0] / dc[0]) / (ac[2] / dc[2])
    return float(ratio_to_spo2(ratio))


def _truth_payload(clip: SynthClip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "orientation_deg": clip.orientation_deg,
        "true_bbox": [int(v) for v in clip.true_bbox[0]],
        "hr_series_bpm": [float(v) for v in clip.hr_series_bpm],
        "spo2_series_pct": [float(v) for v in clip.spo2_series_pct],
        "corruption": [asdict(c) for c in clip.corruption],
    }


def _write_clip(cfg: SynthConfig, out_dir: str, subject: int, index: int) -> ClipEntry:
    clip = generate_clip(cfg, subject, index)
    frames_rel = os.path.join("frames", f"{clip.clip_id}.pfvf")
    ppg_rel = os.path.join("ppg", f"{clip.clip_id}.pfwv")
    truth_rel = os.path.join("truth", f"{clip.clip_id}.json")
    write_frames(os.path.join(out_dir, frames_rel), clip.frames)
    write_waveform(os.path.join(out_dir, ppg_rel), clip.ppg_ref)
    write_waveform(os.path.join(out_dir, "truth", f"{clip.clip_id}_clean.pfwv"), clip.ppg_clean)
    with open(os.path.join(out_dir, truth_rel), "w", encoding="utf-8") as f:
        json.dump(_truth_payload(clip), f, indent=2, sort_keys=True)

    frames_per_window = int(round(WINDOW_S * cfg.fps))
    labels = [
        WindowLabel(k, k * frames_per_window, float(hr), float(spo2))
        for k, (hr, spo2) in enumerate(zip(clip.hr_series_bpm, clip.spo2_series_pct))
    ]
    return ClipEntry(
        clip_id=clip.clip_id,
        frames_path=frames_rel,
        ppg_path=ppg_rel,
        split="train",
        labels=labels,
        orientation_deg=clip.orientation_deg,
        truth_path=truth_rel,
    )


def generate_corpus(cfg: SynthConfig, out_dir: str, threads: int = 1) -> Manifest:
    """
    Write every recording plus ``manifest.json`` under ``out_dir``.

    Output is byte-identical for a given config regardless of ``threads``.
    """
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(s, c) for s in range(cfg.n_subjects) for c in range(cfg.clips_per_subject)]
    log(_STAGE, f"Generating {len(jobs)} recording(s) of {cfg.clip_seconds:g} s ({cfg.preset} preset)")

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        entries = list(pool.map(lambda job: _write_clip(cfg, out_dir, *job), jobs))

    subject_ids = [f"s{s:03d}" for s in range(cfg.n_subjects)]
    splits = assign_splits(subject_ids, cfg.split_fractions, cfg.seed)
    subjects = {sid: SubjectEntry(sid) for sid in subject_ids}
    for (subject, _), entry in zip(jobs, entries):
        entry.split = splits[f"s{subject:03d}"]
        subjects[f"s{subject:03d}"].clips.append(entry)

    manifest = Manifest(list(subjects.values()), root=os.path.abspath(out_dir))
    manifest.save(os.path.join(out_dir, "manifest.json"))
    log(_STAGE, f"Corpus written to {out_dir}")
    return manifest
