import os

import pytest

from pulseface.errors import ManifestError, RangeError
from pulseface.manifest import (
    ClipEntry,
    Manifest,
    SubjectEntry,
    WindowLabel,
    assign_splits,
    validate_manifest,
)
from pulseface.ppg_clean import CleanReport


def _clip(clip_id: str, split: str = "train", labels=None, **kw) -> ClipEntry:
    if labels is None:
        labels = [WindowLabel(0, 0, 90.0, 97.0), WindowLabel(1, 60, 91.0, 97.0)]
    return ClipEntry(clip_id, f"frames/{clip_id}.pffr", f"ppg/{clip_id}.pfwv", split, labels, **kw)


def _manifest(*subjects: tuple[str, list[ClipEntry]]) -> Manifest:
    return Manifest([SubjectEntry(sid, clips) for sid, clips in subjects])


def _rule(manifest: Manifest, check_files: bool = False) -> str:
    with pytest.raises(ManifestError) as info:
        validate_manifest(manifest, check_files=check_files)
    return info.value.rule


def test_valid_manifest_passes():
    validate_manifest(_manifest(("s0", [_clip("a"), _clip("b")]), ("s1", [_clip("c", "test")])), check_files=False)


def test_version_rule():
    m = _manifest(("s0", [_clip("a")]))
    m.version = 2
    assert _rule(m) == "version"


def test_bad_split_rule():
    assert _rule(_manifest(("s0", [_clip("a", "holdout")]))) == "bad-split"


def test_duplicate_clip_id_rule():
    assert _rule(_manifest(("s0", [_clip("a")]), ("s1", [_clip("a", "test")]))) == "duplicate-clip-id"


def test_split_leakage_rule():
    assert _rule(_manifest(("s0", [_clip("a", "train"), _clip("b", "test")]))) == "split-leakage"


def test_label_order_rule():
    labels = [WindowLabel(1, 60, 90.0, 97.0), WindowLabel(0, 0, 90.0, 97.0)]
    assert _rule(_manifest(("s0", [_clip("a", labels=labels)]))) == "label-order"
    same_start = [WindowLabel(0, 0, 90.0, 97.0), WindowLabel(1, 0, 90.0, 97.0)]
    assert _rule(_manifest(("s0", [_clip("a", labels=same_start)]))) == "label-order"


def test_excluded_clip_with_retained_windows_breaks_integrity():
    assert _rule(_manifest(("s0", [_clip("a", retained=False)]))) == "ppg-integrity"


def test_missing_file_rule(tiny_corpus):
    manifest, out = tiny_corpus
    clip = manifest.clips()[0]
    os.remove(out / clip.frames_path)
    assert _rule(manifest, check_files=True) == "missing-file"


def test_window_excluded_by_cleaning_must_not_be_retained(tiny_corpus):
    manifest, out = tiny_corpus
    clip = manifest.clips()[0]
    CleanReport(excluded_windows=[1]).save(str(out / "report.json"))
    clip.clean_report_path = "report.json"
    assert _rule(manifest, check_files=True) == "ppg-integrity"
    clip.labels[1].retained = False
    validate_manifest(manifest)


def test_retained_labels_and_windows():
    labels = [WindowLabel(0, 0, 90.0, 97.0), WindowLabel(1, 60, 91.0, 97.0, retained=False)]
    m = _manifest(("s0", [_clip("a", labels=labels)]), ("s1", [_clip("b", "test", retained=False, labels=[])]))
    assert [(c.clip_id, l.index) for c, l in m.windows()] == [("a", 0)]
    assert m.windows("test") == []
    assert m.find_clip("b").split == "test"
    with pytest.raises(KeyError):
        m.find_clip("zz")


def test_assign_splits_counts_and_determinism():
    ids = [f"s{i}" for i in range(6)]
    splits = assign_splits(ids, seed=4)
    assert sorted(splits.values()).count("train") == 4
    assert sorted(splits.values()).count("val") == 1
    assert sorted(splits.values()).count("test") == 1
    assert splits == assign_splits(ids, seed=4)
    assert set(splits) == set(ids)


def test_assign_splits_fills_every_split_for_three_subjects():
    assert sorted(assign_splits(["a", "b", "c"]).values()) == ["test", "train", "val"]


def test_assign_splits_rejects_bad_fractions():
    with pytest.raises(RangeError):
        assign_splits(["a"], fractions=(0.5, 0.5, 0.5))


def test_save_load_round_trip(tmp_path):
    m = _manifest(("s0", [_clip("a", truth_path="truth/a.json")]), ("s1", [_clip("b", "val")]))
    path = tmp_path / "sub" / "manifest.json"
    m.save(str(path))
    loaded = Manifest.load(str(path))
    assert loaded == m
    assert loaded.root == str(tmp_path / "sub")
    assert loaded.resolve("ppg/a.pfwv") == os.path.join(str(tmp_path / "sub"), "ppg/a.pfwv")
    assert "root" not in m.to_dict()
