import math

import numpy as np
import pytest

from pulseface.errors import RangeError, ReconstructionRefused
from pulseface.ppg_clean import (
    DROPPED,
    RECONSTRUCTED,
    CleanReport,
    DenoiseConfig,
    FeatureQualityScreen,
    FlaggedInterval,
    builtin_quality_score,
    builtin_reconstruct,
    denoise_ppg,
    hrv_screen,
    quality_features,
    reconstruct_short_gaps,
    screen_quality,
)
from pulseface.signal_core import Waveform, dominant_frequency, extract_hr_bpm
from pulseface.synthgen import SynthConfig, generate_clip, inject_artifacts, pulse_template

FS = 60.0


def pulse(seconds: float, freq_hz: float = 1.3, seed: int = 0) -> Waveform:
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * FS)) / FS
    x = pulse_template(2 * math.pi * freq_hz * t) + 0.1 * np.sin(2 * math.pi * 0.25 * t)
    return Waveform(x + rng.normal(0.0, 0.02, t.size), FS)


def with_noise(w: Waveform, start_s: float, end_s: float, scale: float = 2.2, seed: int = 1) -> Waveform:
    rng = np.random.default_rng(seed)
    samples = w.samples.copy()
    a, b = int(start_s * FS), int(end_s * FS)
    samples[a:b] = rng.normal(0.0, scale, b - a)
    return w.replace(samples=samples)


def sine(seconds: float, freq_hz: float) -> Waveform:
    t = np.arange(int(seconds * FS)) / FS
    return Waveform(np.sin(2 * math.pi * freq_hz * t), FS)


def test_clean_pulse_scores_above_threshold():
    assert builtin_quality_score(pulse(30.0)) >= FeatureQualityScreen().threshold


def test_white_noise_scores_below_threshold(rng):
    assert builtin_quality_score(Waveform(rng.normal(size=1800), FS)) < FeatureQualityScreen().threshold


def test_flat_line_scores_below_threshold():
    flat = Waveform(np.full(1800, 0.7), FS)
    assert quality_features(flat) == (0.0, 0.0, 1.0, 0.0)
    assert builtin_quality_score(flat) < FeatureQualityScreen().threshold


def test_screen_keeps_clean_signal():
    assert screen_quality(pulse(90.0)).mean() < 0.05


def test_screen_flags_corrupted_stretch():
    dirty = screen_quality(with_noise(pulse(120.0), 40.0, 80.0))
    assert dirty[int(50 * FS) : int(70 * FS)].all()
    assert not dirty[: int(10 * FS)].any()
    assert not dirty[int(110 * FS) :].any()


def test_screen_flags_fully_corrupted_signal(rng):
    assert screen_quality(Waveform(rng.normal(size=int(90 * FS)), FS)).mean() > 0.9


def test_short_input_gets_one_verdict(rng):
    clean = screen_quality(pulse(10.0))
    noisy = screen_quality(Waveform(rng.normal(size=600), FS))
    assert not clean.any()
    assert noisy.all()


def _truth_mask(n: int, intervals) -> np.ndarray:
    truth = np.zeros(n, dtype=bool)
    for i in intervals:
        truth[int(round(i.start_s * FS)) : int(round(i.end_s * FS))] = True
    return truth


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_screen_recall_and_false_positives_on_injected_artifacts(seed):
    corrupted, intervals = inject_artifacts(pulse(300.0), 0.2, seed)
    truth = _truth_mask(len(corrupted), intervals)
    dirty = screen_quality(corrupted)
    assert dirty[truth].mean() >= 0.9
    assert dirty[~truth].mean() <= 0.1


def test_localize_marks_flat_and_weak_blocks():
    w = pulse(30.0)
    samples = w.samples.copy()
    samples[int(10 * FS) : int(12 * FS)] = samples[int(10 * FS)]
    samples[int(20 * FS) : int(21 * FS)] *= 0.2
    mask = FeatureQualityScreen().localize(w.replace(samples=samples))
    expected = np.zeros(len(w), dtype=bool)
    expected[int(10 * FS) : int(12 * FS)] = True
    expected[int(20 * FS) : int(21 * FS)] = True
    np.testing.assert_array_equal(mask, expected)


def test_localize_keeps_clean_pulse():
    for freq in (1.3, 2.0, 2.9):
        assert not FeatureQualityScreen().localize(pulse(30.0, freq)).any()


def test_no_dirty_samples_is_a_no_op():
    w = pulse(20.0)
    out, report = reconstruct_short_gaps(w, np.zeros(len(w), dtype=bool))
    assert out is w
    assert report.flagged_intervals == []


def test_short_gap_is_reconstructed():
    w = pulse(40.0)
    corrupted = with_noise(w, 20.0, 23.0)
    dirty = np.zeros(len(w), dtype=bool)
    dirty[int(20 * FS) : int(23 * FS)] = True
    out, report = reconstruct_short_gaps(corrupted, dirty)
    assert report.flagged_intervals == [FlaggedInterval(20.0, 23.0, RECONSTRUCTED)]
    assert out.quality_mask.all()
    np.testing.assert_array_equal(out.samples[~dirty], corrupted.samples[~dirty])
    rebuilt = Waveform(out.samples[dirty], FS)
    assert extract_hr_bpm(rebuilt) == pytest.approx(78.0, abs=5.0)


def test_long_and_boundary_gaps_are_dropped():
    w = pulse(60.0)
    dirty = np.zeros(len(w), dtype=bool)
    dirty[: int(2 * FS)] = True
    dirty[int(20 * FS) : int(40 * FS)] = True
    out, report = reconstruct_short_gaps(w, dirty)
    assert [i.action for i in report.flagged_intervals] == [DROPPED, DROPPED]
    assert not out.quality_mask[dirty].any()
    assert report.retained_fraction == pytest.approx(38.0 / 60.0)


def test_reconstruct_stationary_tone():
    before, after = sine(8.0, 2.0), sine(8.0, 2.0)
    filled = builtin_reconstruct(before, 180, after)
    assert filled.shape == (180,)
    assert dominant_frequency(Waveform(filled, FS)) == pytest.approx(2.0, abs=0.05)


def test_reconstruct_sweeps_between_contexts():
    filled = builtin_reconstruct(sine(8.0, 1.8), 480, sine(8.0, 2.2))
    first = dominant_frequency(Waveform(filled[:240], FS))
    second = dominant_frequency(Waveform(filled[240:], FS))
    assert 1.7 < first < second < 2.3


def test_reconstruct_edge_cases():
    assert builtin_reconstruct(sine(8.0, 2.0), 0, None).shape == (0,)
    with pytest.raises(ReconstructionRefused):
        builtin_reconstruct(sine(2.0, 2.0), 60, None)
    one_sided = builtin_reconstruct(None, 120, sine(8.0, 1.5))
    assert one_sided.shape == (120,)


def _switching_rate_signal() -> Waveform:
    t = np.arange(int(6 * FS)) / FS
    freq = np.where(t < 3.0, 2.0, 7.0 / 3.0)
    phase = 2 * math.pi * np.concatenate([[0.0], np.cumsum(freq[:-1]) / FS])
    return Waveform(np.cos(phase), FS)


def test_hrv_screen_keeps_steady_rhythm():
    result = hrv_screen(sine(10.0, 2.0))
    assert result.retained_windows == (0, 1, 2, 3, 4)
    assert result.excluded_windows == ()


def test_hrv_screen_rejects_rate_jump():
    result = hrv_screen(_switching_rate_signal(), ["a", "b", "c"])
    assert result.retained_windows == (0, 2)
    assert result.excluded_windows == (1,)
    assert result.retained_clip_ids == ("a", "c")


def test_hrv_screen_rejects_masked_windows():
    w = sine(6.0, 2.0)
    mask = np.ones(len(w), dtype=bool)
    mask[130] = False
    assert hrv_screen(w.replace(quality_mask=mask)).excluded_windows == (1,)


def test_hrv_screen_checks_clip_ids():
    with pytest.raises(RangeError):
        hrv_screen(sine(6.0, 2.0), ["a"])


def test_denoise_clean_signal_keeps_everything():
    result = denoise_ppg(pulse(60.0))
    assert result.report.flagged_intervals == []
    assert result.report.excluded_windows == []
    assert result.report.retained_fraction == 1.0
    assert len(result.hrv.retained_windows) == 30


def test_denoise_drops_long_corruption():
    result = denoise_ppg(with_noise(pulse(60.0), 20.0, 40.0), cfg=DenoiseConfig())
    assert set(range(10, 20)) <= set(result.report.excluded_windows)
    assert result.report.retained_fraction <= 0.7
    assert DROPPED in {i.action for i in result.report.flagged_intervals}
    assert not result.waveform.quality_mask[int(25 * FS) : int(35 * FS)].any()


def _clean_window_fraction(intervals, n_windows: int, window_s: float = 2.0) -> float:
    clean = [
        k
        for k in range(n_windows)
        if all(i.end_s <= k * window_s or i.start_s >= (k + 1) * window_s for i in intervals)
    ]
    return len(clean) / n_windows


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_denoise_retains_about_the_clean_window_share(seed):
    cfg = SynthConfig(n_subjects=1, clip_seconds=120.0, frame_size=(16, 16), artifact_rate=0.2, seed=seed)
    clip = generate_clip(cfg, 0, 0)
    result = denoise_ppg(clip.ppg_ref)
    n_windows = len(result.hrv.retained_windows) + len(result.hrv.excluded_windows)
    assert n_windows == 60
    truth = _clean_window_fraction(clip.corruption, n_windows)
    assert len(result.hrv.retained_windows) / n_windows == pytest.approx(truth, abs=0.1)
    assert result.report.retained_fraction == pytest.approx(truth, abs=0.1)


def test_reconstructed_windows_stay_out_of_the_label_set():
    corrupted = with_noise(pulse(40.0), 20.0, 23.0)
    default = denoise_ppg(corrupted)
    assert [i.action for i in default.report.flagged_intervals] == [RECONSTRUCTED]
    assert {10, 11} <= set(default.report.excluded_windows)
    assert not default.waveform.quality_mask[int(20 * FS) : int(24 * FS)].any()
    assert not np.array_equal(default.waveform.samples, corrupted.samples)

    labelled = denoise_ppg(corrupted, cfg=DenoiseConfig(label_reconstructed=True))
    assert labelled.report.flagged_intervals == default.report.flagged_intervals
    assert set(labelled.report.excluded_windows) <= set(default.report.excluded_windows)


def test_clean_report_json_round_trip(tmp_path):
    report = CleanReport([FlaggedInterval(1.0, 2.0, RECONSTRUCTED), FlaggedInterval(5.0, 25.0, DROPPED)], 0.6, [2, 3])
    path = tmp_path / "r.json"
    report.save(str(path))
    assert CleanReport.load(str(path)) == report


def test_clean_report_rejects_overlaps():
    with pytest.raises(RangeError):
        CleanReport([FlaggedInterval(1.0, 3.0, DROPPED), FlaggedInterval(2.0, 4.0, DROPPED)])
