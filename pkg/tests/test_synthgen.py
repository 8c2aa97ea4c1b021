import os

import numpy as np
import pytest

from pulseface.errors import RangeError
from pulseface.manifest import validate_manifest
from pulseface.signal_core import Waveform, extract_hr_bpm, resample_linear
from pulseface.synthgen import (
    PRESETS,
    SynthConfig,
    decode_spo2,
    generate_clip,
    generate_corpus,
    inject_artifacts,
    ratio_to_spo2,
    spo2_to_ratio,
)


def _tree_bytes(root) -> dict[str, bytes]:
    out = {}
    for folder, _, files in os.walk(root):
        for name in files:
            path = os.path.join(folder, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = f.read()
    return out


def test_corpus_is_byte_identical_across_runs_and_threads(tmp_path, tiny_synth):
    generate_corpus(tiny_synth, str(tmp_path / "serial"))
    generate_corpus(tiny_synth, str(tmp_path / "pooled"), threads=3)
    serial, pooled = _tree_bytes(tmp_path / "serial"), _tree_bytes(tmp_path / "pooled")
    assert serial.keys() == pooled.keys()
    assert "manifest.json" in serial
    assert all(serial[k] == pooled[k] for k in serial)


def test_corpus_manifest_layout(tiny_corpus):
    manifest, root = tiny_corpus
    validate_manifest(manifest)
    clips = manifest.clips()
    assert len(clips) == 6
    assert [label.start_frame for label in clips[0].labels] == [0, 60, 120]
    assert {c.split for c in clips} == {"train", "val", "test"}
    assert (root / "truth" / f"{clips[0].clip_id}.json").exists()


def test_clean_preset_has_no_corruption(tiny_synth):
    clip = generate_clip(tiny_synth, 0, 0)
    assert clip.ppg_ref.quality_mask.all()
    assert clip.corruption == []
    assert clip.frames.data.shape == (180, 32, 32, 3)
    assert len(clip.hr_series_bpm) == 3


def test_ppg_matches_hr_label():
    cfg = SynthConfig(
        n_subjects=1, clip_seconds=10.0, frame_size=(32, 32), hr_range_bpm=(119.9, 120.1), hr_drift_bpm=0.0
    )
    clip = generate_clip(cfg, 0, 0)
    assert clip.hr_series_bpm.mean() == pytest.approx(120.0, abs=0.1)
    ppg = resample_linear(clip.ppg_ref, 30.0)
    assert extract_hr_bpm(ppg) == pytest.approx(120.0, abs=0.5)


def test_rendered_frames_carry_the_pulse():
    cfg = SynthConfig(n_subjects=1, clip_seconds=10.0, frame_size=(32, 32), hr_range_bpm=(89.9, 90.1), hr_drift_bpm=0.0)
    clip = generate_clip(cfg, 0, 0, orientation_deg=0)
    green = clip.frames.data[:, 12:20, 12:20, 1].mean(axis=(1, 2))
    assert extract_hr_bpm(Waveform(green, 30.0)) == pytest.approx(90.0, abs=2.0)


def test_spo2_round_trips_through_the_ratio():
    values = np.array([87.0, 93.5, 99.0])
    np.testing.assert_allclose(ratio_to_spo2(spo2_to_ratio(values)), values)


def test_spo2_decodes_from_frames():
    cfg = SynthConfig(n_subjects=1, clip_seconds=10.0, seed=2)
    clip = generate_clip(cfg, 0, 0, orientation_deg=90)
    assert decode_spo2(clip.frames) == pytest.approx(clip.spo2_series_pct[0], abs=1.0)


def test_inject_artifacts_rate_zero_is_identity(rng):
    w = Waveform(rng.normal(size=600), 60.0)
    out, intervals = inject_artifacts(w, 0.0, seed=1)
    assert out is w
    assert intervals == []


def test_inject_artifacts_rate_one_covers_everything(rng):
    w = Waveform(rng.normal(size=1200), 60.0)
    _, intervals = inject_artifacts(w, 1.0, seed=1)
    covered = np.zeros(len(w), dtype=bool)
    for interval in intervals:
        covered[int(round(interval.start_s * 60)) : int(round(interval.end_s * 60))] = True
    assert covered.all()


def test_inject_artifacts_hits_target_fraction(rng):
    w = Waveform(rng.normal(size=60 * 120), 60.0)
    out, intervals = inject_artifacts(w, 0.2, seed=4)
    fraction = sum(i.end_s - i.start_s for i in intervals) / w.duration_s
    assert fraction == pytest.approx(0.2, abs=0.05)
    assert all(0.0 <= i.start_s < i.end_s <= w.duration_s for i in intervals)
    assert out.quality_mask.all()
    assert not np.array_equal(out.samples, w.samples)


def test_presets_and_validation():
    assert PRESETS["hard"].artifact_rate == 0.2
    assert SynthConfig.from_preset("hard", n_subjects=2).n_subjects == 2
    with pytest.raises(RangeError):
        SynthConfig.from_preset("noisy")
    with pytest.raises(RangeError):
        SynthConfig(frame_size=(32, 48))
    with pytest.raises(RangeError):
        SynthConfig(rotation_bins=(45,))
    with pytest.raises(RangeError):
        generate_clip(SynthConfig(n_subjects=1, clip_seconds=2.0), 0, 0, orientation_deg=45)
