"""From annotations and feature timelines to labeled folds.

Pipeline: merge seizures closer than the gap threshold, paint a
per-second period track (precedence ictal > preictal > excluded >
interictal), assemble 38-s sequence samples on a 1-s stride, then divide
into leave-one-seizure-out folds under either the even or the
seizure-independent scheme, and balance the training class mix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import EXCLUDED, ICTAL, INTERICTAL, PREICTAL, FeatureTimeline
from .records import SeizureAnnotations

SEQ_LEN = 19          # feature vectors per sample
SEQ_SPACING_S = 2     # seconds between consecutive vectors
SEQ_SPAN_S = (SEQ_LEN - 1) * SEQ_SPACING_S + 2  # signal seconds one sample covers: 38

DEFAULT_SPH_S = 180
DEFAULT_SOP_S = 1800
DEFAULT_EXCLUSION_S = 3600
DEFAULT_MERGE_GAP_S = 3600
MIN_PREICTAL_FRACTION = 0.5   # seizures with less available preictal are omitted


class DivisionError(ValueError):
    """Too few qualifying seizures for the requested division."""


class BalanceError(ValueError):
    """A class needed for balancing is absent."""


@dataclass
class MergedSeizure:
    onset_s: float
    end_s: float
    count: int = 1


@dataclass
class PeriodLabeling:
    track: np.ndarray  # int8 per-second codes, length = record duration

    def __len__(self):
        return len(self.track)


@dataclass
class SequenceSample:
    """One model input, viewing 19 rows of its parent timeline (no copy)."""

    timeline: FeatureTimeline
    anchor_s: int
    label: int                 # 0 interictal, 1 preictal
    seizure_index: int         # first seizure with onset > anchor; -1 if none
    record_id: str = ""

    @property
    def features(self) -> np.ndarray:
        """19 x channels x 44 view."""
        a = self.anchor_s
        return self.timeline.features[a:a + (SEQ_LEN - 1) * SEQ_SPACING_S + 1:SEQ_SPACING_S]


@dataclass
class Fold:
    train: list
    test: list
    held_out: int              # seizure index under test
    kind: str                  # "even" | "seizure-independent"
    preictal_only: bool = False


def merge_seizures(ann: SeizureAnnotations,
                   merge_gap_s: float = DEFAULT_MERGE_GAP_S) -> list[MergedSeizure]:
    """Greedy left-to-right merge of events separated by < merge_gap_s."""
    merged: list[MergedSeizure] = []
    for onset, end in ann.events:
        if merged and onset - merged[-1].end_s < merge_gap_s:
            merged[-1].end_s = end
            merged[-1].count += 1
        else:
            merged.append(MergedSeizure(onset_s=onset, end_s=end))
    return merged


def label_timeline(duration_s: float, merged: list[MergedSeizure],
                   sph_s: float = DEFAULT_SPH_S, sop_s: float = DEFAULT_SOP_S,
                   exclusion_s: float = DEFAULT_EXCLUSION_S) -> PeriodLabeling:
    """Per-second period track.

    A second t belongs to a zone when its start instant does; painting in
    the order excluded, preictal, ictal realizes the precedence
    ictal > preictal > excluded > interictal.
    """
    n = int(duration_s)
    track = np.full(n, INTERICTAL, dtype=np.int8)

    def paint(lo: float, hi: float, code: int) -> None:
        a = max(int(np.ceil(lo)), 0)
        b = min(int(np.ceil(hi)), n)
        if a < b:
            track[a:b] = code

    for s in merged:
        paint(s.onset_s - exclusion_s, s.onset_s, EXCLUDED)
        paint(s.end_s, s.end_s + exclusion_s, EXCLUDED)
    for s in merged:
        paint(s.onset_s - sph_s - sop_s, s.onset_s - sph_s, PREICTAL)
    for s in merged:
        paint(s.onset_s, s.end_s, ICTAL)
    return PeriodLabeling(track=track)


def qualifying_seizures(merged: list[MergedSeizure], duration_s: float,
                        sph_s: float = DEFAULT_SPH_S, sop_s: float = DEFAULT_SOP_S,
                        min_fraction: float = MIN_PREICTAL_FRACTION) -> list[int]:
    """Indices of seizures whose available preictal span is long enough."""
    keep = []
    for k, s in enumerate(merged):
        lo = max(s.onset_s - sph_s - sop_s, 0.0)
        hi = min(s.onset_s - sph_s, duration_s)
        if hi - lo >= min_fraction * sop_s:
            keep.append(k)
    return keep


def build_sequences(tl: FeatureTimeline, merged: list[MergedSeizure],
                    record_id: str = "") -> list[SequenceSample]:
    """All label-pure 38-s samples on a 1-s anchor stride.

    A sample exists at anchor t when the 19 stamps t, t+2, ..., t+36 all
    carry the same label and that label is preictal or interictal.
    """
    labels = tl.labels
    n = len(labels)
    span = (SEQ_LEN - 1) * SEQ_SPACING_S + 1  # stamps covered: 37
    if n < span:
        return []
    stamped = np.lib.stride_tricks.sliding_window_view(labels, span)[:, ::SEQ_SPACING_S]
    pure = (stamped == stamped[:, :1]).all(axis=1)
    first = stamped[:, 0]
    usable = pure & ((first == PREICTAL) | (first == INTERICTAL))

    onsets = np.array([s.onset_s for s in merged], dtype=np.float64)
    samples = []
    for anchor in np.nonzero(usable)[0]:
        following = np.searchsorted(onsets, anchor, side="right")
        seizure_index = int(following) if following < len(onsets) else -1
        samples.append(SequenceSample(
            timeline=tl,
            anchor_s=int(anchor),
            label=1 if first[anchor] == PREICTAL else 0,
            seizure_index=seizure_index,
            record_id=record_id,
        ))
    return samples


def _preictal_by_seizure(samples: list[SequenceSample]) -> dict[int, list[SequenceSample]]:
    out: dict[int, list[SequenceSample]] = {}
    for s in samples:
        if s.label == 1:
            out.setdefault(s.seizure_index, []).append(s)
    return out


def split_even(samples: list[SequenceSample], seizure_ids: list[int]) -> list[Fold]:
    """LOOCV with the concatenated interictal sample stream split evenly.

    Fold k tests seizure_ids[k]'s preictal samples plus the k-th of n
    contiguous, near-equal chunks of the interictal stream.
    """
    n = len(seizure_ids)
    if n < 2:
        raise DivisionError(f"even division needs >= 2 seizures, got {n}")
    preictal = _preictal_by_seizure(samples)
    missing = [k for k in seizure_ids if not preictal.get(k)]
    if missing:
        raise DivisionError(f"seizures {missing} have no preictal samples")
    interictal = [s for s in samples if s.label == 0]
    chunks = np.array_split(np.arange(len(interictal)), n)
    folds = []
    for k, sid in enumerate(seizure_ids):
        test = list(preictal[sid]) + [interictal[i] for i in chunks[k]]
        train = [s for j in range(n) if j != k for s in preictal[seizure_ids[j]]]
        train += [interictal[i] for j in range(n) if j != k for i in chunks[j]]
        folds.append(Fold(train=train, test=test, held_out=sid, kind="even"))
    return folds


def split_seizure_independent(samples: list[SequenceSample],
                              seizure_ids: list[int]) -> list[Fold]:
    """LOOCV where interictal data is divided only at seizures.

    The interictal span preceding a qualifying seizure is tested together
    with that seizure's preictal data; trailing interictal (after the
    last seizure) rides with the last fold.  Preictal samples of
    non-qualifying seizures are dropped entirely.
    """
    preictal = _preictal_by_seizure(samples)
    qualifying = [k for k in seizure_ids if preictal.get(k)]
    if not qualifying:
        raise DivisionError("no seizure has preictal samples")

    def fold_of(s: SequenceSample) -> int:
        # first qualifying seizure at or after the sample's own span
        for pos, k in enumerate(qualifying):
            if s.seizure_index != -1 and s.seizure_index <= k:
                return pos
        return len(qualifying) - 1

    spans: dict[int, list[SequenceSample]] = {pos: [] for pos in range(len(qualifying))}
    for s in samples:
        if s.label == 0:
            spans[fold_of(s)].append(s)

    independent = sum(1 for pos in spans if spans[pos])
    if independent < 3:
        raise DivisionError(
            f"only {independent} seizure-independent interictal periods, need >= 3"
        )

    folds = []
    for pos, sid in enumerate(qualifying):
        test = list(preictal[sid]) + spans[pos]
        train = [s for j, k in enumerate(qualifying) if j != pos for s in preictal[k]]
        train += [s for j in range(len(qualifying)) if j != pos for s in spans[j]]
        folds.append(Fold(train=train, test=test, held_out=sid,
                          kind="seizure-independent",
                          preictal_only=not spans[pos]))
    return folds


def balance(train: list[SequenceSample], policy: str = "undersample",
            rng_seed: int = 0) -> tuple[list[SequenceSample], tuple[float, float]]:
    """Even out the class mix; returns (samples, per-class loss weights)."""
    if not train:
        raise BalanceError("empty training set")
    neg = [s for s in train if s.label == 0]
    pos = [s for s in train if s.label == 1]
    if not neg:
        raise BalanceError("class interictal is absent from the training set")
    if not pos:
        raise BalanceError("class preictal is absent from the training set")
    if policy == "undersample":
        rng = np.random.default_rng(rng_seed)
        target = min(len(neg), len(pos))
        if len(neg) > target:
            keep = sorted(rng.choice(len(neg), size=target, replace=False))
            neg = [neg[i] for i in keep]
        if len(pos) > target:
            keep = sorted(rng.choice(len(pos), size=target, replace=False))
            pos = [pos[i] for i in keep]
        merged = sorted(neg + pos, key=lambda s: (s.record_id, s.anchor_s))
        return merged, (1.0, 1.0)
    if policy == "weighted":
        total = len(train)
        raw = (total / len(neg), total / len(pos))
        scale = 2.0 / (raw[0] + raw[1])  # normalize to mean 1 across classes
        return list(train), (raw[0] * scale, raw[1] * scale)
    raise ValueError(f"unknown balance policy {policy!r}")


def write_fold_manifest(folds: list[Fold], path) -> None:
    """One line per sample: record-id anchor_s label fold-id role."""
    path = Path(path)
    with open(path, "w") as fh:
        for i, fold in enumerate(folds):
            for role, group in (("train", fold.train), ("test", fold.test)):
                for s in group:
                    fh.write(f"{s.record_id} {s.anchor_s} {s.label} {i} {role}\n")
