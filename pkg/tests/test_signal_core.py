import math

import numpy as np
import pytest
from scipy import signal

from conftest import tone
from pulseface.errors import NoSignalError, RangeError, ShapeError, SignalLengthError
from pulseface.signal_core import (
    BandpassSpec,
    Waveform,
    bandpass,
    design_bandpass,
    dominant_frequency,
    estimate_hr,
    extract_hr_bpm,
    fill_masked,
    filter_zero_phase,
    psd,
    resample_linear,
)


def test_waveform_rejects_bad_inputs():
    with pytest.raises(SignalLengthError):
        Waveform([], 30.0)
    with pytest.raises(RangeError):
        Waveform([1.0, 2.0], 0.0)
    with pytest.raises(ShapeError):
        Waveform([1.0, 2.0, 3.0], 30.0, [True, False])


def test_waveform_is_read_only():
    w = Waveform(np.arange(4.0), 2.0)
    with pytest.raises(ValueError):
        w.samples[0] = 9.0
    assert w.duration_s == 2.0
    assert w.quality_mask.all()


def test_design_matches_reference_butterworth():
    coeffs = design_bandpass(BandpassSpec(0.4, 4.0, 2), 30.0)
    b, a = signal.butter(2, [0.4, 4.0], btype="band", fs=30.0)
    assert coeffs.order == 4
    np.testing.assert_allclose(coeffs.b, b, atol=1e-9)
    np.testing.assert_allclose(coeffs.a, a, atol=1e-9)


def test_design_gain_at_center_and_edges():
    coeffs = design_bandpass(BandpassSpec(), 30.0)
    center = math.sqrt(0.4 * 4.0)
    gains = np.abs(coeffs.frequency_response([center, 0.4, 4.0], 30.0))
    assert gains[0] == pytest.approx(1.0, abs=1e-3)
    np.testing.assert_allclose(gains[1:], 1.0 / math.sqrt(2.0), rtol=1e-6)


@pytest.mark.parametrize("low, high", [(0.0, 4.0), (4.0, 0.4), (0.4, 15.0), (0.4, 20.0)])
def test_design_rejects_cutoffs_outside_nyquist(low, high):
    with pytest.raises(RangeError):
        design_bandpass(BandpassSpec(low, high, 2), 30.0)


def test_bandpass_keeps_in_band_tone():
    w = tone(1.5, 20.0)
    out = bandpass(w)
    middle = slice(150, 450)
    np.testing.assert_allclose(out.samples[middle], w.samples[middle], atol=0.02)


def test_bandpass_attenuates_out_of_band_tone():
    w = tone(10.0, 20.0)
    out = bandpass(w)
    ratio_db = 20 * math.log10(out.samples[150:450].std() / w.samples[150:450].std())
    assert ratio_db <= -12.0


def test_bandpass_removes_dc():
    w = Waveform(np.full(600, 3.0), 30.0)
    out = bandpass(w)
    assert np.abs(out.samples[150:450]).max() < 1e-6


def test_zero_phase_commutes_with_time_reversal(rng):
    w = Waveform(rng.normal(size=600), 30.0)
    coeffs = design_bandpass(BandpassSpec(), 30.0)
    forward = filter_zero_phase(w, coeffs).samples
    reversed_ = filter_zero_phase(w.replace(samples=w.samples[::-1]), coeffs).samples[::-1]
    np.testing.assert_allclose(forward[150:450], reversed_[150:450], atol=1e-3)


def test_filter_rejects_short_signal():
    coeffs = design_bandpass(BandpassSpec(), 30.0)
    with pytest.raises(SignalLengthError):
        filter_zero_phase(Waveform(np.ones(12), 30.0), coeffs)


def test_psd_peaks_at_tone_frequency():
    spectrum = psd(tone(2.0, 2.0))
    assert spectrum.freqs_hz[np.argmax(spectrum.power)] == pytest.approx(2.0, abs=0.01)


def test_psd_of_constant_is_zero():
    spectrum = psd(Waveform(np.full(60, 5.0), 30.0))
    assert spectrum.power.max() < 1e-20


def test_psd_sums_to_signal_energy(rng):
    x = rng.normal(size=100)
    spectrum = psd(Waveform(x, 30.0), zero_pad_to=100)
    centered = x - x.mean()
    assert spectrum.power.sum() == pytest.approx(np.dot(centered, centered), rel=1e-9)


def test_psd_rejects_short_padding():
    with pytest.raises(RangeError):
        psd(tone(1.0, 2.0), zero_pad_to=30)


def test_dominant_frequency_picks_larger_component():
    t = np.arange(300) / 30.0
    w = Waveform(np.sin(2 * math.pi * 1.0 * t) + 0.3 * np.sin(2 * math.pi * 3.0 * t), 30.0)
    assert dominant_frequency(w) == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("freq_hz", [1.0, 1.5, 2.0, 2.5, 3.0])
def test_hr_of_pure_tone(freq_hz):
    assert extract_hr_bpm(tone(freq_hz, 10.0, phase=0.3)) == pytest.approx(60 * freq_hz, abs=0.5)


def test_hr_on_two_second_window():
    assert extract_hr_bpm(tone(2.0, 2.0)) == pytest.approx(120.0, abs=1.0)


def test_hr_with_noise(rng):
    t = np.arange(300) / 30.0
    x = np.sin(2 * math.pi * 1.9 * t) + rng.normal(0.0, math.sqrt(0.05), t.size)
    assert extract_hr_bpm(Waveform(x, 30.0)) == pytest.approx(114.0, abs=2.0)


def test_hr_of_respiration_stays_in_band():
    bpm = extract_hr_bpm(tone(0.2, 10.0))
    assert 24.0 <= bpm <= 240.0


def test_hr_of_flat_signal_is_low_confidence():
    estimate = estimate_hr(Waveform(np.zeros(120), 30.0))
    assert estimate.low_confidence


def test_hr_of_clean_tone_is_confident():
    assert not estimate_hr(tone(1.2, 10.0)).low_confidence


def test_hr_needs_two_seconds():
    with pytest.raises(SignalLengthError):
        extract_hr_bpm(tone(2.0, 1.5))


def test_hr_ignores_masked_burst():
    w = tone(1.5, 10.0)
    samples = w.samples.copy()
    samples[100:130] = 50.0
    mask = np.ones(len(w), dtype=bool)
    mask[100:130] = False
    assert extract_hr_bpm(Waveform(samples, 30.0, mask)) == pytest.approx(90.0, abs=1.0)


def test_fill_masked_requires_some_signal():
    with pytest.raises(NoSignalError):
        fill_masked(Waveform(np.ones(5), 30.0, np.zeros(5, dtype=bool)))


def test_resample_ramp_halves_rate():
    out = resample_linear(Waveform(np.arange(60.0), 60.0), 30.0)
    assert out.sample_rate_hz == 30.0
    np.testing.assert_allclose(out.samples, np.arange(0.0, 60.0, 2.0))


def test_resample_propagates_mask():
    mask = np.ones(60, dtype=bool)
    mask[10] = False
    out = resample_linear(Waveform(np.arange(60.0), 60.0, mask), 30.0)
    assert np.flatnonzero(~out.quality_mask).tolist() == [5]


def test_resample_upsamples_linearly():
    out = resample_linear(Waveform([0.0, 1.0, 2.0], 1.0), 2.0)
    np.testing.assert_allclose(out.samples, [0.0, 0.5, 1.0, 1.5, 2.0])
