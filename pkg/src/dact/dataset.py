"""Dataset manifests, action sequences, wrap-around frame sets and
subject-disjoint folds.

A manifest is a UTF-8 CSV with header `path,subject,class,frame_index,split`
plus a `classes.txt` sidecar (one class name per line, line number = label).
Image pixels are loaded lazily by path; the manifest is the single source of
truth.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyManifestError, InfeasibleFoldError, ManifestError

SPLITS = ("train", "test", "unassigned")
MANIFEST_HEADER = ["path", "subject", "class", "frame_index", "split"]


@dataclass
class FrameRecord:
    path: str
    subject_id: str
    class_label: int
    frame_index: int
    split_tag: str = "unassigned"


@dataclass
class ActionSequence:
    """One driver's one action: ordered frames sharing subject and class."""

    subject_id: str
    class_label: int
    frames: list[FrameRecord]

    def __len__(self):
        return len(self.frames)

    @property
    def split_tag(self):
        return self.frames[0].split_tag


@dataclass
class DatasetManifest:
    records: list[FrameRecord]
    class_names: list[str]
    subjects: list[str]
    root: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.root, path)


@dataclass
class FrameSet:
    """Exactly N frames of one sequence, wrapping past the end."""

    frames: list[FrameRecord]
    source: ActionSequence
    anchor_index: int


@dataclass
class FoldPlan:
    folds: list[tuple[tuple[str, ...], tuple[str, ...]]]  # (train, test) subjects
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        obj = json.loads(text)
        folds = [(tuple(f["train"]), tuple(f["test"])) for f in obj["folds"]]
        return cls(folds=folds, seed=int(obj["seed"]))


def ingest_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV plus its classes.txt sidecar."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    if os.path.getsize(path) == 0:
        raise EmptyManifestError(f"manifest is empty: {path}")
    root = os.path.dirname(os.path.abspath(path))

    classes_path = os.path.join(root, "classes.txt")
    if not os.path.exists(classes_path):
        raise ManifestError(f"class registry missing: {classes_path}")
    with open(classes_path, encoding="utf-8") as f:
        class_names = [line.rstrip("\n") for line in f if line.strip()]
    if not class_names:
        raise ManifestError(f"class registry empty: {classes_path}")

    records = []
    seen_paths = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyManifestError(f"manifest is empty: {path}") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"bad header {header!r}, expected {MANIFEST_HEADER}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 5:
                raise ManifestError(f"expected 5 fields, got {len(row)}", line=lineno)
            fpath, subject, cls_s, idx_s, split = (v.strip() for v in row)
            if not fpath:
                raise ManifestError("empty path", line=lineno)
            if fpath in seen_paths:
                raise ManifestError(f"duplicate path {fpath!r}", line=lineno)
            seen_paths.add(fpath)
            if not subject:
                raise ManifestError("empty subject", line=lineno)
            try:
                cls = int(cls_s)
                idx = int(idx_s)
            except ValueError:
                raise ManifestError(
                    f"non-integer class/frame_index {cls_s!r}/{idx_s!r}",
                    line=lineno) from None
            if not 0 <= cls < len(class_names):
                raise ManifestError(
                    f"class {cls} out of range [0, {len(class_names)})", line=lineno)
            if idx < 0:
                raise ManifestError(f"negative frame_index {idx}", line=lineno)
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}", line=lineno)
            records.append(FrameRecord(fpath, subject, cls, idx, split))

    subjects = sorted({r.subject_id for r in records})
    return DatasetManifest(records=records, class_names=class_names,
                           subjects=subjects, root=root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = os.fspath(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.path, r.subject_id, r.class_label,
                             r.frame_index, r.split_tag])
    with open(os.path.join(os.path.dirname(os.path.abspath(path)),
                           "classes.txt"), "w", encoding="utf-8") as f:
        for name in manifest.class_names:
            f.write(name + "\n")


def restructure(manifest: DatasetManifest) -> list[ActionSequence]:
    """Group records into one sequence per (subject, class, split),
    sorted by frame_index. Total frames are conserved."""
    groups: dict[tuple, list[FrameRecord]] = {}
    for r in manifest.records:
        groups.setdefault((r.subject_id, r.class_label, r.split_tag), []).append(r)
    sequences = []
    for key in sorted(groups):
        frames = sorted(groups[key], key=lambda r: r.frame_index)
        for a, b in zip(frames, frames[1:]):
            if b.frame_index == a.frame_index:
                raise ManifestError(
                    f"duplicate frame_index {a.frame_index} for subject "
                    f"{key[0]!r} class {key[1]} split {key[2]!r}")
        sequences.append(ActionSequence(key[0], key[1], frames))
    return sequences


def sequences_for_split(sequences, split):
    return [s for s in sequences if s.split_tag == split]


def generate_frame_sets(seq: ActionSequence, n_frames: int) -> list[FrameSet]:
    """One set per frame: the anchor plus the next n_frames-1 frames,
    wrapping to the sequence start."""
    if not seq.frames:
        raise ManifestError("cannot generate frame sets from empty sequence")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    total = len(seq.frames)
    sets = []
    for anchor in range(total):
        frames = [seq.frames[(anchor + j) % total] for j in range(n_frames)]
        sets.append(FrameSet(frames=frames, source=seq, anchor_index=anchor))
    return sets


def frame_set_positions(fs: FrameSet) -> list[int]:
    total = len(fs.source.frames)
    return [(fs.anchor_index + j) % total for j in range(len(fs.frames))]


def subject_kfold(sequences, k: int, seed: int) -> FoldPlan:
    """Shuffle subjects by seed and partition into k near-equal test groups."""
    subjects = sorted({s.subject_id for s in sequences})
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(subjects):
        raise InfeasibleFoldError(
            f"cannot make {k} folds from {len(subjects)} subjects")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    q, r = divmod(len(order), k)
    folds = []
    start = 0
    for i in range(k):
        size = q + (1 if i < r else 0)
        test = tuple(order[start:start + size])
        train = tuple(s for s in order if s not in test)
        folds.append((train, test))
        start += size
    return FoldPlan(folds=folds, seed=seed)
