"""
Corpus manifest: the JSON index binding frame files, reference PPG files,
per-window labels and split assignments.

File paths are stored relative to the manifest's own directory.
"""

import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from pulseface.errors import ManifestError, RangeError
from pulseface.ppg_clean import CleanReport

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.7, 0.15, 0.15)


@dataclass
class WindowLabel:
    index: int
    start_frame: int
    hr_bpm: float
    spo2_pct: float
    retained: bool = True


@dataclass
class ClipEntry:
    clip_id: str
    frames_path: str
    ppg_path: str
    split: str
    labels: list[WindowLabel] = field(default_factory=list)
    retained: bool = True
    orientation_deg: int = 0
    truth_path: str | None = None
    aligned_path: str | None = None
    cleaned_ppg_path: str | None = None
    clean_report_path: str | None = None

    def retained_labels(self) -> list[WindowLabel]:
        if not self.retained:
            return []
        return [label for label in self.labels if label.retained]


@dataclass
class SubjectEntry:
    subject_id: str
    clips: list[ClipEntry] = field(default_factory=list)


@dataclass
class Manifest:
    subjects: list[SubjectEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: str = field(default="", compare=False)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def relative(self, path: str) -> str:
        return os.path.relpath(path, self.root) if self.root else path

    def clips(self, split: str | None = None) -> list[ClipEntry]:
        return [
            clip
            for subject in self.subjects
            for clip in subject.clips
            if split is None or clip.split == split
        ]

    def windows(self, split: str | None = None) -> list[tuple[ClipEntry, WindowLabel]]:
        """Retained (clip, window) pairs, in manifest order."""
        return [(clip, label) for clip in self.clips(split) for label in clip.retained_labels()]

    def find_clip(self, clip_id: str) -> ClipEntry:
        for clip in self.clips():
            if clip.clip_id == clip_id:
                return clip
        raise KeyError(clip_id)

    def to_dict(self) -> dict:
        return {"version": self.version, "subjects": [asdict(s) for s in self.subjects]}

    @classmethod
    def from_dict(cls, data: dict, root: str = "") -> "Manifest":
        subjects = []
        for subject in data.get("subjects", []):
            clips = []
            for clip in subject.get("clips", []):
                clip = dict(clip)
                clip["labels"] = [WindowLabel(**label) for label in clip.get("labels", [])]
                clips.append(ClipEntry(**clip))
            subjects.append(SubjectEntry(subject["subject_id"], clips))
        return cls(subjects, int(data.get("version", MANIFEST_VERSION)), root)

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls.from_dict(data, root=os.path.dirname(os.path.abspath(path)))


def assign_splits(
    subject_ids: list[str],
    fractions: tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict[str, str]:
    """
    Assign whole subjects to train/val/test.

    Counts follow the largest-remainder rule; with three or more subjects
    every split receives at least one subject.
    """
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise RangeError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(subject_ids)
    exact = np.asarray(fractions) * n
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if n >= 3:
        for i in (1, 2):
            if counts[i] == 0:
                counts[i] += 1
                counts[int(np.argmax(counts))] -= 1

    order = np.random.default_rng(seed).permutation(n)
    labels = np.repeat(np.arange(3), counts)
    return {subject_ids[idx]: SPLITS[labels[pos]] for pos, idx in enumerate(order)}


def validate_manifest(manifest: Manifest, check_files: bool = True) -> None:
    """
    Check every manifest rule, raising ``ManifestError`` on the first violation.

    Rules: ``version``, ``bad-split``, ``duplicate-clip-id``, ``split-leakage``,
    ``label-order``, ``ppg-integrity`` and, when ``check_files``,
    ``missing-file``.
    """
    if manifest.version != MANIFEST_VERSION:
        raise ManifestError("version", f"unsupported manifest version {manifest.version}")

    seen_ids = set()
    subject_splits = defaultdict(set)
    for subject in manifest.subjects:
        for clip in subject.clips:
            if clip.split not in SPLITS:
                raise ManifestError("bad-split", f"clip {clip.clip_id} has split {clip.split!r}")
            if clip.clip_id in seen_ids:
                raise ManifestError("duplicate-clip-id", f"clip id {clip.clip_id} appears twice")
            seen_ids.add(clip.clip_id)
            subject_splits[subject.subject_id].add(clip.split)

    for subject_id, splits in subject_splits.items():
        if len(splits) > 1:
            raise ManifestError(
                "split-leakage", f"subject {subject_id} appears in splits {sorted(splits)}"
            )

    for clip in manifest.clips():
        indices = [label.index for label in clip.labels]
        starts = [label.start_frame for label in clip.labels]
        if any(b <= a for a, b in zip(indices, indices[1:])) or any(
            b <= a for a, b in zip(starts, starts[1:])
        ):
            raise ManifestError("label-order", f"clip {clip.clip_id} windows are not strictly ascending")

        if not clip.retained and any(label.retained for label in clip.labels):
            raise ManifestError(
                "ppg-integrity", f"clip {clip.clip_id} is excluded but still has retained windows"
            )

        if not check_files:
            continue
        for path in (
            clip.frames_path,
            clip.ppg_path,
            clip.truth_path,
            clip.aligned_path,
            clip.cleaned_ppg_path,
            clip.clean_report_path,
        ):
            if path is not None and not os.path.exists(manifest.resolve(path)):
                raise ManifestError("missing-file", f"clip {clip.clip_id}: {path} does not exist")

        if clip.clean_report_path is not None:
            report = CleanReport.load(manifest.resolve(clip.clean_report_path))
            retained = {label.index for label in clip.retained_labels()}
            leaked = sorted(retained.intersection(report.excluded_windows))
            if leaked:
                raise ManifestError(
                    "ppg-integrity",
                    f"clip {clip.clip_id}: windows {leaked} were excluded by PPG cleaning but are still retained",
                )
