"""EEG record and seizure-annotation containers plus text-format IO.

A record is channels x samples in microvolts at a fixed integer sampling
rate.  Annotations are (onset_s, end_s) pairs in record time, stored in a
one-line-per-event plain-text sidecar: ``seizure <onset_s> <end_s>``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RecordError(ValueError):
    """A record file or its contents are unusable."""


class AnnotationError(ValueError):
    """An annotation file is malformed or inconsistent."""


# The 18 bipolar channels shared by all patients, in index order 0..17.
CANONICAL_CHANNELS = (
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1", "P3-O1", "C3-P3", "F3-C3", "FP1-F3",
    "FZ-CZ", "CZ-PZ", "P4-O2", "C4-P4", "F4-C4", "FP2-F4", "FP2-F8", "F8-T8",
    "T8-P8", "P8-O2",
)


def normalize_label(label: str) -> str:
    return label.strip().upper()


@dataclass
class EegRecord:
    sampling_rate: int
    channel_labels: list[str]
    samples: np.ndarray  # channels x time, microvolts, float64
    start_time: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise RecordError(f"samples must be 2-d, got shape {self.samples.shape}")
        if len(self.channel_labels) != self.samples.shape[0]:
            raise RecordError(
                f"{len(self.channel_labels)} labels for {self.samples.shape[0]} channels"
            )
        if self.sampling_rate <= 0:
            raise RecordError(f"sampling_rate must be positive, got {self.sampling_rate}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sampling_rate


@dataclass
class SeizureAnnotations:
    events: list[tuple[float, float]] = field(default_factory=list)
    patient_id: str = ""

    def __post_init__(self):
        self.events = sorted((float(a), float(b)) for a, b in self.events)
        for onset, end in self.events:
            if not onset < end:
                raise AnnotationError(f"inverted seizure interval ({onset}, {end})")
        for (_, prev_end), (onset, _) in zip(self.events, self.events[1:]):
            if onset < prev_end:
                raise AnnotationError(
                    f"overlapping seizure intervals near onset {onset}"
                )

    @property
    def onsets(self) -> list[float]:
        return [onset for onset, _ in self.events]


def read_csv_record(path, sampling_rate: int) -> EegRecord:
    """Read a record stored as CSV: header row of labels, one row per sample."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            labels = next(reader)
        except StopIteration:
            raise RecordError(f"{path}: empty file") from None
        labels = [lab.strip() for lab in labels]
        columns: list[list[float]] = [[] for _ in labels]
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(labels):
                raise RecordError(
                    f"{path}: line {lineno}: {len(row)} fields, expected {len(labels)}"
                )
            try:
                for col, value in zip(columns, row):
                    col.append(float(value))
            except ValueError as exc:
                raise RecordError(f"{path}: line {lineno}: {exc}") from None
    if not columns[0]:
        raise RecordError(f"{path}: no sample rows")
    samples = np.array(columns, dtype=np.float64)
    return EegRecord(sampling_rate=sampling_rate, channel_labels=labels, samples=samples)


def write_csv_record(record: EegRecord, path) -> None:
    """Write a record as CSV with full float precision (round-trips bit-exactly)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(record.channel_labels)
        for row in record.samples.T:
            writer.writerow([repr(float(v)) for v in row])


def load_annotations(path, patient_id: str | None = None) -> SeizureAnnotations:
    """Parse a ``seizure <onset_s> <end_s>`` sidecar; events come back sorted."""
    path = Path(path)
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] != "seizure":
                raise AnnotationError(
                    f"{path}: line {lineno}: expected 'seizure <onset_s> <end_s>'"
                )
            try:
                events.append((float(parts[1]), float(parts[2])))
            except ValueError:
                raise AnnotationError(f"{path}: line {lineno}: non-numeric bounds") from None
    if patient_id is None:
        patient_id = path.stem
    return SeizureAnnotations(events=events, patient_id=patient_id)


def save_annotations(ann: SeizureAnnotations, path) -> None:
    with open(path, "w") as fh:
        for onset, end in ann.events:
            fh.write(f"seizure {onset:g} {end:g}\n")
