"""Record containers, rhythm annotations, label grouping and stratified splits."""
from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import ContainerError, header_int, payload_array, read_file, require, write_file

FS = 977
CHANNELS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
            "RVA12", "CS12", "CS34", "CS56", "CS78", "CS90")
N_ECG = 12


class MajorClass(enum.IntEnum):
    SINUS = 1
    SVT = 2
    PACED = 3
    ATRIAL_TACHY = 4
    ECTOPIC = 5
    TACHY = 6


N_CLASSES = len(MajorClass)

CLASS_NAMES = {
    MajorClass.SINUS: "Sinus rhythm",
    MajorClass.SVT: "Supraventricular Tachycardia",
    MajorClass.PACED: "Paced beats",
    MajorClass.ATRIAL_TACHY: "Atrial Tachycardia",
    MajorClass.ECTOPIC: "Ectopic rhythm",
    MajorClass.TACHY: "Tachycardias",
}

AUX_TO_MAJOR = {
    "(N": MajorClass.SINUS,
    "(AVRT": MajorClass.SVT, "(AVNRT": MajorClass.SVT,
    "(/A": MajorClass.PACED, "(/V": MajorClass.PACED,
    "(AFIB": MajorClass.ATRIAL_TACHY, "(EAT": MajorClass.ATRIAL_TACHY,
    "(AFL": MajorClass.ATRIAL_TACHY,
    "(A": MajorClass.ECTOPIC, "(B": MajorClass.ECTOPIC, "(J": MajorClass.ECTOPIC,
    "(VT": MajorClass.TACHY, "(IVR": MajorClass.TACHY,
}

# window counts per major class in the source database
TABLE_I_COUNTS = (7126, 2682, 1270, 54, 32, 9)


def map_aux_to_major(aux_label: str) -> MajorClass:
    try:
        return AUX_TO_MAJOR[aux_label.strip()]
    except KeyError:
        raise ValueError(f"unknown aux label {aux_label!r}") from None


# ---------------------------------------------------------------------------
# records


@dataclass
class RawRecord:
    subject_id: str
    fs: int
    channel_names: tuple[str, ...]
    data: np.ndarray  # [18, T] float32, millivolts

    def __post_init__(self):
        if tuple(self.channel_names) != CHANNELS:
            raise ContainerError("channel list mismatch")
        if self.fs != FS:
            raise ContainerError(f"unsupported sampling rate {self.fs}")
        if self.data.ndim != 2 or self.data.shape[0] != len(CHANNELS) or self.data.shape[1] < 1:
            raise ContainerError(f"record data must be [18, T>=1], got {self.data.shape}")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]


def write_record(record: RawRecord, path: str | Path) -> None:
    fields = {
        "format": "sigc", "version": 1, "subject_id": record.subject_id,
        "fs": record.fs, "n_channels": len(record.channel_names),
        "channels": ",".join(record.channel_names), "n_samples": record.n_samples,
        "dtype": "float32le",
    }
    payload = np.ascontiguousarray(record.data, dtype="<f4").tobytes()
    write_file(path, fields, payload)


def load_record(path: str | Path) -> RawRecord:
    fields, payload = read_file(path)
    require(fields, "format", "subject_id", "fs", "n_channels", "channels", "n_samples", "dtype")
    if fields["format"] != "sigc":
        raise ContainerError(f"malformed header: format={fields['format']!r}")
    if fields["dtype"] != "float32le":
        raise ContainerError(f"malformed header: dtype={fields['dtype']!r}")
    names = tuple(fields["channels"].split(","))
    if header_int(fields, "n_channels") != len(CHANNELS) or names != CHANNELS:
        raise ContainerError("channel list mismatch")
    n = header_int(fields, "n_samples")
    if n < 1:
        raise ContainerError("malformed header: n_samples < 1")
    data = payload_array(payload, "<f4", len(CHANNELS) * n).reshape(len(CHANNELS), n)
    return RawRecord(fields["subject_id"], header_int(fields, "fs"), names, data)


# ---------------------------------------------------------------------------
# annotations and segments


@dataclass(frozen=True)
class AnnotationInterval:
    start: int
    end: int
    aux_label: str


def read_annotations(path: str | Path) -> list[AnnotationInterval]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'start end label'")
        out.append(AnnotationInterval(int(parts[0]), int(parts[1]), parts[2]))
    return out


def write_annotations(anns: list[AnnotationInterval], path: str | Path) -> None:
    Path(path).write_text("".join(f"{a.start} {a.end} {a.aux_label}\n" for a in anns))


@dataclass
class Segment:
    subject_id: str
    index: int
    start: int
    aux_label: str
    data: np.ndarray  # [18, n]

    @property
    def length(self) -> int:
        return self.data.shape[1]


def extract_labeled_segments(record: RawRecord, anns: list[AnnotationInterval]) -> list[Segment]:
    """One segment per annotated interval; everything outside is dropped."""
    t = record.n_samples
    ordered = sorted(anns, key=lambda a: a.start)
    for a in ordered:
        if not 0 <= a.start < a.end <= t:
            raise ValueError(f"interval out of range: [{a.start}, {a.end}) for T={t}")
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise ValueError(f"overlapping intervals at sample {cur.start}")
    return [Segment(record.subject_id, i, a.start, a.aux_label, record.data[:, a.start:a.end])
            for i, a in enumerate(ordered)]


# ---------------------------------------------------------------------------
# manifest and split


@dataclass(frozen=True)
class ManifestEntry:
    window_id: str
    subject_id: str
    segment: int
    offset: int
    major_class: int
    aux_label: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    @property
    def class_counts(self) -> np.ndarray:
        counts = np.zeros(N_CLASSES, dtype=np.int64)
        for e in self.entries:
            counts[e.major_class - 1] += 1
        return counts


SPLITS = ("train", "val", "test")


def stratified_split(manifest: DatasetManifest, ratios=(0.7, 0.1, 0.2),
                     seed: int = 0) -> dict[str, str]:
    """Per aux-label stratified assignment of window ids to train/val/test.

    Each group is shuffled with a group-specific stream, then sized by
    flooring ``n * ratio``; leftovers go to test first, then val.  Groups of
    one or two windows keep at least one window in train.
    """
    if not manifest.entries:
        raise ValueError("empty manifest")
    groups: dict[str, list[str]] = defaultdict(list)
    for e in manifest.entries:
        groups[e.aux_label].append(e.window_id)
    assignment: dict[str, str] = {}
    for g, aux in enumerate(sorted(groups)):
        ids = sorted(groups[aux])
        n = len(ids)
        sizes = [int(np.floor(n * r + 1e-9)) for r in ratios]
        leftover = n - sum(sizes)
        for k in (2, 1, 0):
            if leftover == 0:
                break
            sizes[k] += 1
            leftover -= 1
        if sizes[0] == 0:
            donor = 2 if sizes[2] else 1
            sizes[donor] -= 1
            sizes[0] += 1
        rng = np.random.default_rng([seed, g])
        order = [ids[i] for i in rng.permutation(n)]
        bounds = np.cumsum(sizes)
        for i, wid in enumerate(order):
            assignment[wid] = SPLITS[int(np.searchsorted(bounds, i, side="right"))]
    return assignment


def write_manifest(manifest: DatasetManifest, split: dict[str, str] | None,
                   path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["window_id", "subject_id", "segment", "offset", "major_class",
                    "aux_label", "split"])
        for e in manifest.entries:
            w.writerow([e.window_id, e.subject_id, e.segment, e.offset, e.major_class,
                        e.aux_label, split.get(e.window_id, "") if split else ""])


def read_manifest(path: str | Path) -> tuple[DatasetManifest, dict[str, str]]:
    entries, split = [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            entries.append(ManifestEntry(row["window_id"], row["subject_id"], int(row["segment"]),
                                         int(row["offset"]), int(row["major_class"]),
                                         row["aux_label"]))
            if row.get("split"):
                split[row["window_id"]] = row["split"]
    return DatasetManifest(entries), split
