"""
Ground-truth PPG cleaning.

Three stages run in a fixed order:
    A. quality screening over overlapping 30 s windows (majority vote per sample)
    B. reconstruction of dirty runs shorter than 15 s, dropping longer ones
    C. HRV gating of 2 s windows whose instantaneous heart rate spreads more
       than 15 bpm; excluded windows take their paired video clips with them
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Protocol

import numpy as np
from scipy import signal, stats

from pulseface.errors import RangeError, ReconstructionRefused, SignalLengthError
from pulseface.signal_core import (
    HR_BAND_HZ,
    Waveform,
    bandpass,
    dominant_frequency,
    fill_masked,
    psd,
)
from pulseface.tools.log import log, warn

_STAGE = "Denoise"

RECONSTRUCTED = "reconstructed"
DROPPED = "dropped"


@dataclass(frozen=True)
class DenoiseConfig:
    window_s: float = 30.0
    shift_s: float = 2.0
    threshold: float = -10.0
    max_gap_s: float = 15.0
    chunk_s: float = 2.0
    context_s: float = 8.0
    min_context_s: float = 4.0
    hrv_window_s: float = 2.0
    hrv_threshold_bpm: float = 15.0
    label_reconstructed: bool = False

    def __post_init__(self):
        for name in ("window_s", "shift_s", "max_gap_s", "chunk_s", "context_s", "hrv_window_s"):
            if not getattr(self, name) > 0:
                raise RangeError(f"denoise.{name} must be positive, got {getattr(self, name)}")
        if self.min_context_s > self.context_s:
            raise RangeError("denoise.min_context_s must not exceed denoise.context_s")


class QualityScreen(Protocol):
    """
    Window-level quality verdict.

    A screen may also define ``localize(window) -> bool array`` marking the
    dirty samples inside a window; ``screen_quality`` then votes with that mask
    instead of the whole-window verdict.
    """

    threshold: float

    def score(self, window: Waveform) -> float:
        """Higher is cleaner; ``score >= threshold`` means clean."""
        ...


class Reconstructor(Protocol):
    def reconstruct(
        self, before: Waveform | None, gap_len: int, after: Waveform | None
    ) -> np.ndarray:
        """Return exactly ``gap_len`` samples bridging the two contexts."""
        ...


class QualityFeatures(NamedTuple):
    skewness: float
    kurtosis: float
    spectral_entropy: float
    autocorr_prominence: float


# Mean and spread of each feature on clean synthetic pulse windows
REFERENCE_STATS = QualityFeatures(
    skewness=(0.5, 0.3),
    kurtosis=(-1.3, 0.4),
    spectral_entropy=(0.3, 0.15),
    autocorr_prominence=(1.8, 0.2),
)


@dataclass(frozen=True)
class FlaggedInterval:
    start_s: float
    end_s: float
    action: str


@dataclass
class CleanReport:
    flagged_intervals: list[FlaggedInterval] = field(default_factory=list)
    retained_fraction: float = 1.0
    excluded_windows: list[int] = field(default_factory=list)

    def __post_init__(self):
        for prev, cur in zip(self.flagged_intervals, self.flagged_intervals[1:]):
            if cur.start_s < prev.end_s:
                raise RangeError(f"flagged intervals overlap or are unordered: {prev} then {cur}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CleanReport":
        data = json.loads(text)
        return cls(
            flagged_intervals=[FlaggedInterval(**i) for i in data.get("flagged_intervals", [])],
            retained_fraction=float(data.get("retained_fraction", 1.0)),
            excluded_windows=[int(i) for i in data.get("excluded_windows", [])],
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "CleanReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


class HrvScreenResult(NamedTuple):
    retained_windows: tuple[int, ...]
    excluded_windows: tuple[int, ...]
    retained_clip_ids: tuple[str, ...]


@dataclass(frozen=True)
class DenoiseResult:
    waveform: Waveform
    report: CleanReport
    hrv: HrvScreenResult


def _spectral_entropy(w: Waveform) -> float:
    spectrum = psd(w, len(w)).band(*HR_BAND_HZ)
    total = spectrum.power.sum()
    if spectrum.power.size < 2 or total <= 0:
        return 1.0
    p = spectrum.power / total
    p = p[p > 0]
    return float(-(p * np.log(p)).sum() / math.log(spectrum.power.size))


def _autocorr_prominence(w: Waveform) -> float:
    x = w.samples - w.samples.mean()
    energy = float(np.dot(x, x))
    if energy <= 0:
        return 0.0
    period = int(round(w.sample_rate_hz / dominant_frequency(w)))
    max_lag = int(math.ceil(1.2 * period))
    if period < 2 or max_lag >= len(x):
        return 0.0
    full = signal.correlate(x, x, mode="full", method="fft") / energy
    r = full[len(x) - 1 : len(x) + max_lag]
    lo = int(math.floor(0.8 * period))
    return float(r[lo : max_lag + 1].max() - r[1 : period + 1].min())


def quality_features(window: Waveform) -> QualityFeatures:
    """Skewness, excess kurtosis, normalized in-band spectral entropy and autocorrelation prominence."""
    x = window.samples
    if x.std() < 1e-12:
        return QualityFeatures(0.0, 0.0, 1.0, 0.0)
    return QualityFeatures(
        skewness=float(stats.skew(x)),
        kurtosis=float(stats.kurtosis(x)),
        spectral_entropy=_spectral_entropy(window),
        autocorr_prominence=_autocorr_prominence(window),
    )


class BlockFeatures(NamedTuple):
    spread: np.ndarray
    roughness: np.ndarray
    spikiness: np.ndarray
    flat_fraction: np.ndarray


def block_features(x: np.ndarray, bounds: np.ndarray) -> BlockFeatures:
    """
    Short-block statistics between consecutive ``bounds``.

    roughness is std(diff) / std, which stays well below 1 for a band-limited
    pulse and reaches sqrt(2) for white noise. spikiness is max|diff| / std(diff)
    and picks up baseline steps. flat_fraction counts zero first differences.
    """
    n_blocks = len(bounds) - 1
    spread = np.zeros(n_blocks)
    roughness = np.full(n_blocks, np.inf)
    spikiness = np.full(n_blocks, np.inf)
    flat = np.ones(n_blocks)
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        block = x[a:b]
        if block.size < 3:
            continue
        d = np.diff(block)
        spread[k] = block.std()
        flat[k] = float(np.mean(np.abs(d) <= 1e-12 * max(1.0, float(np.abs(block).max()))))
        d_spread = d.std()
        if spread[k] > 1e-12 and d_spread > 1e-12:
            roughness[k] = d_spread / spread[k]
            spikiness[k] = np.abs(d - d.mean()).max() / d_spread
    return BlockFeatures(spread, roughness, spikiness, flat)


@dataclass(frozen=True)
class FeatureQualityScreen:
    """
    Feature-based screen: negative sum of absolute z-scores against clean reference statistics.

    ``localize`` narrows a verdict down to ``block_s`` blocks. A block is dirty
    when it is rough, spiky or flat, or when its amplitude leaves
    ``amplitude_range`` relative to the median of the window's pulse-like blocks.
    """

    threshold: float = -10.0
    reference: QualityFeatures = REFERENCE_STATS
    block_s: float = 1.0
    max_roughness: float = 0.8
    max_spikiness: float = 4.0
    max_flat_fraction: float = 0.25
    amplitude_range: tuple[float, float] = (0.5, 2.0)

    def score(self, window: Waveform) -> float:
        if window.duration_s < 2.0 - 1e-9:
            raise SignalLengthError(f"quality scoring needs >= 2 s, got {window.duration_s:.3f} s")
        features = quality_features(window)
        z = [abs(value - mean) / spread for value, (mean, spread) in zip(features, self.reference)]
        return -float(sum(z))

    def localize(self, window: Waveform) -> np.ndarray:
        n = len(window)
        n_blocks = max(1, int(round(window.duration_s / self.block_s)))
        bounds = np.linspace(0, n, n_blocks + 1).round().astype(np.int64)
        f = block_features(window.samples, bounds)

        pulse_like = (
            (f.flat_fraction < self.max_flat_fraction)
            & (f.roughness <= self.max_roughness)
            & (f.spikiness <= self.max_spikiness)
        )
        dirty = ~pulse_like
        if pulse_like.any():
            lo, hi = self.amplitude_range
            ref = float(np.median(f.spread[pulse_like]))
            dirty |= (f.spread < lo * ref) | (f.spread > hi * ref)
        return np.repeat(dirty, np.diff(bounds))


def builtin_quality_score(window: Waveform) -> float:
    return FeatureQualityScreen().score(window)


def _window_starts(n: int, window: int, shift: int) -> list[int]:
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, shift))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def screen_quality(
    w: Waveform,
    screen: QualityScreen | None = None,
    window_s: float = 30.0,
    shift_s: float = 2.0,
) -> np.ndarray:
    """
    Per-sample dirty mask from overlapping window verdicts.

    A sample is dirty when a strict majority of the windows covering it vote
    it dirty. A window votes with the screen's ``localize`` mask when the
    screen has one and it marks anything; otherwise every sample gets the
    window verdict (score below threshold). Inputs shorter than one window
    are judged as a single window.
    """
    screen = screen or FeatureQualityScreen()
    localize = getattr(screen, "localize", None)
    fs = w.sample_rate_hz
    n = len(w)
    window = int(round(window_s * fs))
    shift = max(1, int(round(shift_s * fs)))

    dirty_votes = np.zeros(n, dtype=np.int64)
    cover = np.zeros(n, dtype=np.int64)
    for start in _window_starts(n, window, shift):
        stop = min(start + window, n)
        part = w.slice(start, stop)
        verdict = screen.score(part) < screen.threshold
        votes = np.asarray(localize(part), dtype=bool) if localize is not None else None
        if votes is None or not votes.any():
            votes = np.full(stop - start, verdict)
        cover[start:stop] += 1
        dirty_votes[start:stop] += votes
    return 2 * dirty_votes > cover


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of True values."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def _fit_side(context: Waveform, anchor_s: float, freq_hz: float) -> np.ndarray:
    """Least-squares fit of mean, fundamental and second harmonic with time zero at ``anchor_s``."""
    t = context.times() - anchor_s
    omega = 2.0 * math.pi * freq_hz * t
    design = np.column_stack(
        [np.ones_like(t), np.cos(omega), np.sin(omega), np.cos(2 * omega), np.sin(2 * omega)]
    )
    coeffs, *_ = np.linalg.lstsq(design, context.samples, rcond=None)
    envelope = np.abs(signal.hilbert(context.samples - context.samples.mean()))
    edge = max(1, int(round(context.sample_rate_hz)))
    near = envelope[-edge:] if anchor_s >= context.duration_s - 1e-9 else envelope[:edge]
    gain = float(near.mean() / envelope.mean()) if envelope.mean() > 0 else 1.0
    coeffs[1:] *= min(max(gain, 0.5), 2.0)
    return coeffs


def _evaluate(coeffs: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return (
        coeffs[0]
        + coeffs[1] * np.cos(phase)
        + coeffs[2] * np.sin(phase)
        + coeffs[3] * np.cos(2 * phase)
        + coeffs[4] * np.sin(2 * phase)
    )


@dataclass(frozen=True)
class SinusoidReconstructor:
    """
    Phase-continuous harmonic extrapolation across a gap.

    Each usable context gets a fundamental-plus-harmonic fit at its dominant
    frequency. The frequency sweeps linearly from the left estimate to the
    right one, and the forward and backward extrapolations are cross-faded
    linearly over the gap.
    """

    min_context_s: float = 4.0

    def reconstruct(
        self, before: Waveform | None, gap_len: int, after: Waveform | None
    ) -> np.ndarray:
        if gap_len <= 0:
            return np.zeros(0)
        use_before = before is not None and before.duration_s >= self.min_context_s - 1e-9
        use_after = after is not None and after.duration_s >= self.min_context_s - 1e-9
        if not (use_before or use_after):
            raise ReconstructionRefused(
                f"need >= {self.min_context_s} s of clean context on at least one side"
            )
        fs = (before if use_before else after).sample_rate_hz
        t = np.arange(gap_len) / fs
        gap_s = gap_len / fs

        f_before = dominant_frequency(before) if use_before else None
        f_after = dominant_frequency(after) if use_after else None
        f_start = f_before if use_before else f_after
        f_end = f_after if use_after else f_before
        sweep = (f_end - f_start) / gap_s

        forward = backward = None
        if use_before:
            # before context ends one sample ahead of the gap's first sample
            coeffs = _fit_side(before, before.duration_s, f_start)
            forward = _evaluate(coeffs, 2 * math.pi * (f_start * t + 0.5 * sweep * t**2))
        if use_after:
            coeffs = _fit_side(after, 0.0, f_end)
            # phase measured backwards from the first sample after the gap
            dt = t - gap_s
            backward = _evaluate(coeffs, 2 * math.pi * (f_end * dt + 0.5 * sweep * dt**2))
        if forward is None:
            return backward
        if backward is None:
            return forward
        fade = (np.arange(gap_len) + 1.0) / (gap_len + 1.0)
        return (1.0 - fade) * forward + fade * backward


def builtin_reconstruct(
    before: Waveform | None, gap_len: int, after: Waveform | None
) -> np.ndarray:
    return SinusoidReconstructor().reconstruct(before, gap_len, after)


def _clean_before(samples, usable, stop, max_len, fs) -> Waveform | None:
    start = max(stop - max_len, 0)
    bad = np.flatnonzero(~usable[start:stop])
    if bad.size:
        start += int(bad[-1]) + 1
    if stop <= start:
        return None
    return Waveform(samples[start:stop], fs)


def _clean_after(samples, usable, start, max_len, fs) -> Waveform | None:
    stop = min(start + max_len, len(samples))
    bad = np.flatnonzero(~usable[start:stop])
    if bad.size:
        stop = start + int(bad[0])
    if stop <= start:
        return None
    return Waveform(samples[start:stop], fs)


def reconstruct_short_gaps(
    w: Waveform,
    dirty: np.ndarray,
    reconstructor: Reconstructor | None = None,
    cfg: DenoiseConfig | None = None,
) -> tuple[Waveform, CleanReport]:
    """
    Fill dirty runs shorter than ``max_gap_s`` and drop the rest.

    Long-enough gaps are rebuilt left to right in ``chunk_s`` steps, each step
    using the already rebuilt samples as its left context. A gap touching
    either end of the signal, or one the reconstructor refuses, is dropped.
    Samples outside dirty runs are returned unchanged.
    """
    cfg = cfg or DenoiseConfig()
    reconstructor = reconstructor or SinusoidReconstructor(cfg.min_context_s)
    dirty = np.asarray(dirty, dtype=bool)
    if dirty.shape != w.samples.shape:
        raise RangeError(f"dirty mask length {dirty.size} does not match waveform length {len(w)}")
    if not dirty.any():
        return w, CleanReport(retained_fraction=float(w.quality_mask.mean()))

    fs = w.sample_rate_hz
    n = len(w)
    samples = w.samples.copy()
    usable = w.quality_mask & ~dirty
    max_gap = cfg.max_gap_s * fs
    chunk = max(1, int(round(cfg.chunk_s * fs)))
    context = int(round(cfg.context_s * fs))

    intervals = []
    for a, b in _runs(dirty):
        action = DROPPED
        if (b - a) < max_gap and a > 0 and b < n:
            patch = samples.copy()
            patch_usable = usable.copy()
            after = _clean_after(samples, usable, b, context, fs)
            try:
                pos = a
                while pos < b:
                    before = _clean_before(patch, patch_usable, pos, context, fs)
                    filled = np.asarray(reconstructor.reconstruct(before, b - pos, after))
                    if filled.shape != (b - pos,):
                        raise RangeError(f"reconstructor returned {filled.shape}, expected ({b - pos},)")
                    step = min(chunk, b - pos)
                    patch[pos : pos + step] = filled[:step]
                    patch_usable[pos : pos + step] = True
                    pos += step
            except ReconstructionRefused as exc:
                warn(_STAGE, f"gap {a / fs:.2f}-{b / fs:.2f} s dropped: {exc}")
            else:
                samples[a:b] = patch[a:b]
                usable[a:b] = True
                action = RECONSTRUCTED
        intervals.append(FlaggedInterval(a / fs, b / fs, action))

    n_rebuilt = sum(1 for i in intervals if i.action == RECONSTRUCTED)
    log(_STAGE, f"{len(intervals)} dirty run(s): {n_rebuilt} reconstructed, {len(intervals) - n_rebuilt} dropped")
    cleaned = Waveform(samples, fs, usable)
    return cleaned, CleanReport(intervals, float(usable.mean()))


def _refined_peaks(x: np.ndarray, fs: float, threshold_fraction: float = 0.3) -> np.ndarray:
    peak_max = x.max()
    if peak_max <= 0:
        return np.zeros(0)
    peaks, _ = signal.find_peaks(x, height=threshold_fraction * peak_max, distance=max(1, int(0.25 * fs)))
    inner = peaks[(peaks > 0) & (peaks < len(x) - 1)]
    left, mid, right = x[inner - 1], x[inner], x[inner + 1]
    denom = left - 2 * mid + right
    offset = np.where(denom != 0, 0.5 * (left - right) / np.where(denom != 0, denom, 1), 0.0)
    refined = peaks.astype(np.float64)
    refined[(peaks > 0) & (peaks < len(x) - 1)] += offset
    return refined


def hrv_screen(
    w: Waveform,
    clip_ids: list[str] | None = None,
    window_s: float = 2.0,
    threshold_bpm: float = 15.0,
) -> HrvScreenResult:
    """
    Reject 2 s windows with abnormal beat-to-beat variability.

    The signal is band-passed (0.4-4 Hz) and peaks above 0.3x the window
    maximum with at least 0.25 s spacing are located inside each window.
    A window is excluded when it has fewer than two peaks, contains masked
    samples, or its instantaneous heart rates span more than ``threshold_bpm``.

    ``clip_ids`` pairs each window with its video clip; the ids of retained
    windows are returned alongside the indices.
    """
    fs = w.sample_rate_hz
    size = int(round(window_s * fs))
    n_windows = len(w) // size
    if clip_ids is not None and len(clip_ids) != n_windows:
        raise RangeError(f"{len(clip_ids)} clip ids for {n_windows} windows")

    filtered = bandpass(fill_masked(w)).samples
    retained, excluded = [], []
    for k in range(n_windows):
        start, stop = k * size, (k + 1) * size
        keep = bool(w.quality_mask[start:stop].all())
        if keep:
            peaks = _refined_peaks(filtered[start:stop], fs)
            if peaks.size < 2:
                keep = False
            else:
                rates = 60.0 * fs / np.diff(peaks)
                keep = rates.max() - rates.min() <= threshold_bpm
        (retained if keep else excluded).append(k)

    ids = tuple(clip_ids[k] for k in retained) if clip_ids is not None else ()
    if excluded:
        log(_STAGE, f"HRV screen excluded {len(excluded)} of {n_windows} window(s)")
    return HrvScreenResult(tuple(retained), tuple(excluded), ids)


def _exclude_reconstructed(
    hrv: HrvScreenResult, report: CleanReport, size: int, fs: float, clip_ids: list[str] | None
) -> HrvScreenResult:
    """Move windows overlapping a reconstructed interval from retained to excluded."""
    rebuilt = set()
    for interval in report.flagged_intervals:
        if interval.action == RECONSTRUCTED:
            a = int(round(interval.start_s * fs))
            b = int(round(interval.end_s * fs))
            rebuilt.update(range(a // size, (b - 1) // size + 1))
    moved = rebuilt & set(hrv.retained_windows)
    if not moved:
        return hrv
    retained = tuple(k for k in hrv.retained_windows if k not in moved)
    excluded = tuple(sorted(set(hrv.excluded_windows) | moved))
    ids = tuple(clip_ids[k] for k in retained) if clip_ids is not None else ()
    log(_STAGE, f"{len(moved)} reconstructed window(s) kept out of the label set")
    return HrvScreenResult(retained, excluded, ids)


def denoise_ppg(
    w: Waveform,
    clip_ids: list[str] | None = None,
    screen: QualityScreen | None = None,
    reconstructor: Reconstructor | None = None,
    cfg: DenoiseConfig | None = None,
) -> DenoiseResult:
    """
    Run screening, reconstruction and HRV gating in that order.

    Reconstructed samples stay in the returned waveform, but unless
    ``cfg.label_reconstructed`` is set the windows holding them are excluded
    along with the HRV rejects.
    """
    cfg = cfg or DenoiseConfig()
    screen = screen or FeatureQualityScreen(cfg.threshold)
    dirty = screen_quality(w, screen, cfg.window_s, cfg.shift_s)
    log(_STAGE, f"Screening flagged {dirty.mean():.1%} of {w.duration_s:.1f} s")

    cleaned, report = reconstruct_short_gaps(w, dirty, reconstructor, cfg)
    hrv = hrv_screen(cleaned, clip_ids, cfg.hrv_window_s, cfg.hrv_threshold_bpm)

    size = int(round(cfg.hrv_window_s * w.sample_rate_hz))
    if not cfg.label_reconstructed:
        hrv = _exclude_reconstructed(hrv, report, size, w.sample_rate_hz, clip_ids)
    mask = cleaned.quality_mask.copy()
    for k in hrv.excluded_windows:
        mask[k * size : (k + 1) * size] = False
    mask[len(hrv.retained_windows + hrv.excluded_windows) * size :] = False
    final = cleaned.replace(quality_mask=mask)
    report.excluded_windows = list(hrv.excluded_windows)
    report.retained_fraction = float(mask.mean())
    return DenoiseResult(final, report, hrv)
