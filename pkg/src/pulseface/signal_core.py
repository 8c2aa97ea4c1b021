"""
Signal primitives shared by every stage of the pipeline.

Provides the ``Waveform`` container, Butterworth band-pass design through the
analog prototype / pre-warping / bilinear transform route, forward-backward
filtering, the zero-padded periodogram and the spectral heart-rate estimate
used on both reference PPG and predicted rPPG signals.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import signal

from pulseface.errors import NoSignalError, RangeError, ShapeError, SignalLengthError

_STAGE = "Signal"

HR_BAND_HZ = (0.4, 4.0)
DEFAULT_PAD = 4096
LOW_CONFIDENCE_RATIO = 3.0


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled 1-D signal with a per-sample usability mask.

    Arrays are copied on construction and made read-only, so a Waveform can be
    shared between threads without further care.
    """

    samples: np.ndarray
    sample_rate_hz: float
    quality_mask: np.ndarray | None = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size == 0:
            raise SignalLengthError("waveform must contain at least one sample")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise RangeError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.quality_mask is None:
            mask = np.ones(samples.size, dtype=bool)
        else:
            mask = np.array(self.quality_mask, dtype=bool).reshape(-1)
        if mask.size != samples.size:
            raise ShapeError("Waveform.quality_mask", mask.shape, samples.shape)
        samples.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "quality_mask", mask)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate_hz

    def replace(self, samples=None, quality_mask=None) -> "Waveform":
        return Waveform(
            self.samples if samples is None else samples,
            self.sample_rate_hz,
            self.quality_mask if quality_mask is None else quality_mask,
        )

    def slice(self, start: int, stop: int) -> "Waveform":
        return Waveform(
            self.samples[start:stop], self.sample_rate_hz, self.quality_mask[start:stop]
        )

    def slice_seconds(self, start_s: float, end_s: float) -> "Waveform":
        start = int(round(start_s * self.sample_rate_hz))
        stop = int(round(end_s * self.sample_rate_hz))
        return self.slice(max(start, 0), min(stop, len(self)))


@dataclass(frozen=True)
class BandpassSpec:
    low_cut_hz: float = HR_BAND_HZ[0]
    high_cut_hz: float = HR_BAND_HZ[1]
    order: int = 2

    def validate(self, sample_rate_hz: float) -> None:
        nyquist = sample_rate_hz / 2.0
        if not (0 < self.low_cut_hz < self.high_cut_hz < nyquist):
            raise RangeError(
                f"band-pass cutoffs must satisfy 0 < low < high < Nyquist ({nyquist} Hz); "
                f"got low={self.low_cut_hz}, high={self.high_cut_hz}"
            )
        if int(self.order) != self.order or self.order < 1:
            raise RangeError(f"filter order must be a positive integer, got {self.order}")


class FilterCoefficients(NamedTuple):
    b: np.ndarray
    a: np.ndarray

    @property
    def order(self) -> int:
        return len(self.a) - 1

    def frequency_response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex response H(e^{jw}) evaluated at the given frequencies."""
        freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        _, h = signal.freqz(self.b, self.a, worN=freqs, fs=sample_rate_hz)
        return h


@dataclass(frozen=True, eq=False)
class PsdEstimate:
    freqs_hz: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        if self.freqs_hz.shape != self.power.shape:
            raise ShapeError("PsdEstimate", self.freqs_hz.shape, self.power.shape)

    def band(self, low_hz: float, high_hz: float) -> "PsdEstimate":
        keep = (self.freqs_hz >= low_hz) & (self.freqs_hz <= high_hz)
        return PsdEstimate(self.freqs_hz[keep], self.power[keep])


class HrEstimate(NamedTuple):
    bpm: float
    peak_hz: float
    low_confidence: bool


def design_bandpass(spec: BandpassSpec, sample_rate_hz: float) -> FilterCoefficients:
    """
    Design a digital Butterworth band-pass filter.

    Parameters
    ----------
    spec : BandpassSpec
        Cutoffs in Hz and prototype order (the band-pass has twice as many poles).
    sample_rate_hz : float
        Sampling rate the filter will run at.

    Returns
    -------
    FilterCoefficients
        Numerator ``b`` and denominator ``a`` with ``a[0] == 1``.

    Raises
    ------
    RangeError
        If the cutoffs do not fit inside (0, Nyquist).
    """
    spec.validate(sample_rate_hz)
    z, p, k = signal.buttap(int(spec.order))

    # Pre-warp both edges so the bilinear transform lands them on the requested frequencies
    warped_low = 2.0 * sample_rate_hz * math.tan(math.pi * spec.low_cut_hz / sample_rate_hz)
    warped_high = 2.0 * sample_rate_hz * math.tan(math.pi * spec.high_cut_hz / sample_rate_hz)
    z, p, k = signal.lp2bp_zpk(
        z, p, k, wo=math.sqrt(warped_low * warped_high), bw=warped_high - warped_low
    )
    z, p, k = signal.bilinear_zpk(z, p, k, fs=sample_rate_hz)
    b, a = signal.zpk2tf(z, p, k)
    b = np.real(b).astype(np.float64)
    a = np.real(a).astype(np.float64)
    return FilterCoefficients(b / a[0], a / a[0])


def _odd_extend(x: np.ndarray, padlen: int) -> np.ndarray:
    left = 2.0 * x[0] - x[padlen:0:-1]
    right = 2.0 * x[-1] - x[-2 : -padlen - 2 : -1]
    return np.concatenate([left, x, right])


def filter_zero_phase(w: Waveform, coeffs: FilterCoefficients) -> Waveform:
    """
    Apply ``coeffs`` forward and backward (zero net phase).

    The input is extended at both ends by an odd reflection of ``3 * order``
    samples; Gustafsson initial conditions make the forward-backward and
    backward-forward passes agree, so filtering commutes with time reversal.
    """
    padlen = 3 * coeffs.order
    if len(w) <= padlen:
        raise SignalLengthError(
            f"zero-phase filtering needs more than {padlen} samples, got {len(w)}"
        )
    extended = _odd_extend(w.samples, padlen)
    filtered = signal.filtfilt(coeffs.b, coeffs.a, extended, method="gust")
    return w.replace(samples=filtered[padlen:-padlen])


def bandpass(w: Waveform, spec: BandpassSpec | None = None) -> Waveform:
    """Zero-phase band-pass with the default 0.4-4 Hz, order-2 design."""
    spec = spec or BandpassSpec()
    return filter_zero_phase(w, design_bandpass(spec, w.sample_rate_hz))


def psd(w: Waveform, zero_pad_to: int = DEFAULT_PAD) -> PsdEstimate:
    """
    One-sided periodogram of the mean-removed, zero-padded signal.

    Power is scaled so that its sum equals the energy of the mean-removed
    samples.
    """
    n = len(w)
    if n < 2:
        raise SignalLengthError(f"PSD needs at least 2 samples, got {n}")
    if zero_pad_to < n:
        raise RangeError(f"zero_pad_to ({zero_pad_to}) must be >= signal length ({n})")

    centered = w.samples - w.samples.mean()
    spectrum = np.fft.rfft(centered, n=zero_pad_to)
    power = np.abs(spectrum) ** 2 / zero_pad_to
    if zero_pad_to % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.fft.rfftfreq(zero_pad_to, d=1.0 / w.sample_rate_hz)
    return PsdEstimate(freqs, power)


def dominant_frequency(
    w: Waveform, band: tuple[float, float] = HR_BAND_HZ, zero_pad_to: int = DEFAULT_PAD
) -> float:
    """Frequency of the largest periodogram bin inside ``band`` (no filtering)."""
    spectrum = psd(w, max(zero_pad_to, len(w))).band(*band)
    if spectrum.power.size == 0:
        raise RangeError(f"band {band} contains no frequency bins")
    return float(spectrum.freqs_hz[np.argmax(spectrum.power)])


def fill_masked(w: Waveform) -> Waveform:
    """Replace unusable samples by the mean of the usable ones."""
    mask = w.quality_mask
    if not mask.any():
        raise NoSignalError("every sample of the waveform is masked")
    if mask.all():
        return w
    filled = np.where(mask, w.samples, w.samples[mask].mean())
    return w.replace(samples=filled)


def estimate_hr(
    w: Waveform,
    band: tuple[float, float] = HR_BAND_HZ,
    zero_pad_to: int = DEFAULT_PAD,
    filter_order: int = 2,
) -> HrEstimate:
    """
    Heart rate from the in-band PSD maximum of the band-passed waveform.

    Parameters
    ----------
    w : Waveform
        PPG or rPPG signal covering at least 2 s.
    band : tuple of float
        Search band in Hz, also used for the band-pass.
    zero_pad_to : int
        FFT length; raised to the signal length when shorter.
    filter_order : int
        Butterworth prototype order.

    Returns
    -------
    HrEstimate
        ``bpm`` in [60*band[0], 60*band[1]], the peak frequency, and a
        ``low_confidence`` flag set when the peak is below 3x the in-band
        median power.
    """
    if w.duration_s < 2.0 - 1e-9:
        raise SignalLengthError(f"HR extraction needs >= 2 s of signal, got {w.duration_s:.3f} s")
    w = fill_masked(w)
    filtered = bandpass(w, BandpassSpec(band[0], band[1], filter_order))
    spectrum = psd(filtered, max(zero_pad_to, len(w))).band(*band)

    peak = int(np.argmax(spectrum.power))
    peak_power = spectrum.power[peak]
    median_power = float(np.median(spectrum.power))
    low_confidence = not (peak_power > 0 and peak_power >= LOW_CONFIDENCE_RATIO * median_power)
    peak_hz = float(spectrum.freqs_hz[peak])
    return HrEstimate(60.0 * peak_hz, peak_hz, low_confidence)


def extract_hr_bpm(w: Waveform) -> float:
    """Heart rate in bpm; see ``estimate_hr``."""
    return estimate_hr(w).bpm


def resample_linear(w: Waveform, target_hz: float) -> Waveform:
    """
    Linearly interpolate ``w`` onto a uniform grid at ``target_hz``.

    A target sample is usable only if every source sample closer than
    ``max(1/fs, 1/target_hz)`` to it is usable, so both bracketing samples
    and, when downsampling, every skipped sample take part.
    """
    if not target_hz > 0:
        raise RangeError(f"target rate must be positive, got {target_hz}")
    fs = w.sample_rate_hz
    n = len(w)
    if target_hz == fs:
        return w

    n_out = int(math.floor((n - 1) * target_hz / fs + 1e-9)) + 1
    positions = np.round(np.arange(n_out) * (fs / target_hz), 9)
    values = np.interp(positions, np.arange(n), w.samples)

    half_width = max(1.0, fs / target_hz)
    lo = np.clip(np.floor(np.round(positions - half_width, 9)).astype(int) + 1, 0, n - 1)
    hi = np.clip(np.ceil(np.round(positions + half_width, 9)).astype(int) - 1, 0, n - 1)
    bad_prefix = np.concatenate([[0], np.cumsum(~w.quality_mask)])
    mask = (bad_prefix[hi + 1] - bad_prefix[lo]) == 0
    return Waveform(values, target_hz, mask)
