"""Labeling, merging, sequence assembly, and fold division against
brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from szpred.dataset import (
    BalanceError, DivisionError, Fold, MergedSeizure, SequenceSample,
    balance, build_sequences, label_timeline, merge_seizures,
    qualifying_seizures, split_even, split_seizure_independent,
    write_fold_manifest,
)
from szpred.features import EXCLUDED, ICTAL, INTERICTAL, PREICTAL, FeatureTimeline
from szpred.records import SeizureAnnotations


def brute_force_label(t, merged, sph=180, sop=1800, excl=3600):
    """Classify one second from the definitions, independently."""
    for s in merged:
        if s.onset_s <= t < s.end_s:
            return ICTAL
    for s in merged:
        if s.onset_s - sph - sop <= t < s.onset_s - sph:
            return PREICTAL
    for s in merged:
        if s.onset_s - excl <= t < s.onset_s or s.end_s <= t < s.end_s + excl:
            return EXCLUDED
    return INTERICTAL


def brute_force_merge(events, gap=3600.0):
    """Transitive closure over pairwise gaps; order-free formulation."""
    groups = [[e] for e in events]
    changed = True
    while changed:
        changed = False
        for i in range(len(groups) - 1):
            last_end = max(e[1] for e in groups[i])
            next_onset = min(e[0] for e in groups[i + 1])
            if next_onset - last_end < gap:
                groups[i] += groups.pop(i + 1)
                changed = True
                break
    return [(min(e[0] for e in g), max(e[1] for e in g), len(g)) for g in groups]


def random_layout(rng, duration=12000, max_seizures=5):
    onsets = np.sort(rng.uniform(100, duration - 200, size=rng.integers(0, max_seizures + 1)))
    events = []
    prev_end = -1.0
    for onset in onsets:
        onset = max(onset, prev_end + 1.0)
        end = onset + float(rng.uniform(5, 120))
        if end >= duration:
            continue
        events.append((float(onset), float(end)))
        prev_end = end
    return events


class TestMergeSeizures:
    def test_gap_below_threshold_merges(self):
        ann = SeizureAnnotations(events=[(6000, 6060), (7800, 7860)])
        merged = merge_seizures(ann)
        assert len(merged) == 1
        assert (merged[0].onset_s, merged[0].end_s) == (6000, 7860)
        assert merged[0].count == 2

    def test_gap_exactly_3600_not_merged(self):
        ann = SeizureAnnotations(events=[(1000, 1060), (4660, 4700)])
        assert len(merge_seizures(ann)) == 2

    def test_chain_of_three_merges_to_one(self):
        ann = SeizureAnnotations(events=[(7200, 7210), (9000, 9010), (10800, 10810)])
        merged = merge_seizures(ann)
        assert len(merged) == 1
        oracle = brute_force_merge(ann.events)
        assert [(m.onset_s, m.end_s, m.count) for m in merged] == oracle

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_transitive_closure_oracle(self, seed):
        rng = np.random.default_rng(seed)
        events = random_layout(rng, duration=40000, max_seizures=8)
        merged = merge_seizures(SeizureAnnotations(events=events))
        assert [(m.onset_s, m.end_s, m.count) for m in merged] \
            == brute_force_merge(events)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        events = random_layout(rng, duration=40000, max_seizures=8)
        merged = merge_seizures(SeizureAnnotations(events=events))
        again = merge_seizures(SeizureAnnotations(
            events=[(m.onset_s, m.end_s) for m in merged]))
        assert [(m.onset_s, m.end_s) for m in again] \
            == [(m.onset_s, m.end_s) for m in merged]


class TestLabelTimeline:
    def test_single_seizure_spec_arithmetic(self):
        merged = [MergedSeizure(7200, 7260)]
        track = label_timeline(12000, merged).track
        assert (track[0:3600] == INTERICTAL).all()
        assert (track[3600:5220] == EXCLUDED).all()
        assert (track[5220:7020] == PREICTAL).all()
        assert (track[7020:7200] == EXCLUDED).all()
        assert (track[7200:7260] == ICTAL).all()
        assert (track[7260:10860] == EXCLUDED).all()
        assert (track[10860:] == INTERICTAL).all()

    def test_no_seizures_all_interictal(self):
        track = label_timeline(5000, []).track
        assert (track == INTERICTAL).all()

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_per_second_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        events = random_layout(rng)
        merged = merge_seizures(SeizureAnnotations(events=events))
        track = label_timeline(12000, merged).track
        seconds = rng.integers(0, 12000, size=300)
        for t in seconds:
            assert track[t] == brute_force_label(float(t), merged), f"t={t}"


def make_timeline(labels):
    labels = np.asarray(labels, dtype=np.int8)
    n = len(labels)
    feats = np.arange(n, dtype=np.float64)[:, None, None] * np.ones((1, 2, 44))
    return FeatureTimeline(timestamps=np.arange(n), features=feats,
                           labels=labels, second_labels=labels)


def brute_force_windows(labels):
    """Valid anchors by direct scan of the purity rule."""
    out = []
    n = len(labels)
    for a in range(n - 36):
        stamps = [labels[a + 2 * j] for j in range(19)]
        if len(set(stamps)) == 1 and stamps[0] in (PREICTAL, INTERICTAL):
            out.append((a, 1 if stamps[0] == PREICTAL else 0))
    return out


class TestBuildSequences:
    def test_pure_preictal_span_count(self):
        tl = make_timeline([PREICTAL] * 1799)  # stamps of an 1800-s span
        samples = build_sequences(tl, [MergedSeizure(5000, 5100)])
        assert len(samples) == 1763
        assert samples[0].anchor_s == 0 and samples[-1].anchor_s == 1762
        assert all(s.label == 1 for s in samples)

    def test_excluded_second_blocks_straddling_windows(self):
        labels = [INTERICTAL] * 100
        labels[50] = EXCLUDED
        samples = build_sequences(make_timeline(labels), [])
        anchors = {s.anchor_s for s in samples}
        for a in range(14, 51, 2):
            assert a not in anchors  # windows whose stamps include 50
        assert 13 in anchors  # stamps 13..49 odd offsets skip 50

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force_scan(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.choice([INTERICTAL, PREICTAL, EXCLUDED, ICTAL],
                            p=[0.55, 0.3, 0.1, 0.05], size=160)
        samples = build_sequences(make_timeline(labels), [])
        assert [(s.anchor_s, s.label) for s in samples] \
            == brute_force_windows(labels)

    def test_features_view_spacing(self):
        tl = make_timeline([INTERICTAL] * 60)
        samples = build_sequences(tl, [])
        feats = samples[3].features
        assert feats.shape == (19, 2, 44)
        np.testing.assert_array_equal(feats[:, 0, 0],
                                      np.arange(3, 3 + 37, 2, dtype=float))

    def test_seizure_index_is_next_onset(self):
        labels = [INTERICTAL] * 200
        tl = make_timeline(labels)
        merged = [MergedSeizure(90, 95), MergedSeizure(150, 155)]
        samples = build_sequences(tl, merged)
        for s in samples:
            if s.anchor_s < 90:
                assert s.seizure_index == 0
            elif s.anchor_s < 150:
                assert s.seizure_index == 1
            else:
                assert s.seizure_index == -1


def synthetic_samples(n_interictal, preictal_per_seizure):
    """Interictal stream plus per-seizure preictal groups on one timeline."""
    total = n_interictal + sum(preictal_per_seizure.values())
    tl = make_timeline([INTERICTAL] * (total * 3 + 40))
    samples = []
    t = 0
    for i in range(n_interictal):
        next_onset = min((k for k in preictal_per_seizure), default=-1)
        samples.append(SequenceSample(tl, t, 0, next_onset, "r"))
        t += 1
    for k in sorted(preictal_per_seizure):
        for _ in range(preictal_per_seizure[k]):
            samples.append(SequenceSample(tl, t, 1, k, "r"))
            t += 1
    return samples


class TestSplitEven:
    def test_two_seizures_hundred_interictal(self):
        samples = synthetic_samples(100, {0: 10, 1: 10})
        folds = split_even(samples, [0, 1])
        inter = [s for s in samples if s.label == 0]
        assert [s for s in folds[0].test if s.label == 0] == inter[:50]
        assert [s for s in folds[1].test if s.label == 0] == inter[50:]

    def test_partition_property(self):
        samples = synthetic_samples(103, {0: 5, 1: 7, 2: 6})
        folds = split_even(samples, [0, 1, 2])
        seen = []
        for fold in folds:
            seen += [s for s in fold.test if s.label == 0]
            assert not set(map(id, fold.train)) & set(map(id, fold.test))
        assert sorted(s.anchor_s for s in seen) \
            == sorted(s.anchor_s for s in samples if s.label == 0)

    def test_needs_two_seizures(self):
        samples = synthetic_samples(10, {0: 5})
        with pytest.raises(DivisionError):
            split_even(samples, [0])


class TestSplitSeizureIndependent:
    def test_patient01_shaped_layout(self):
        # interictal spans (h): 1.8 9.1 0.2 0.4 3.4 before seizures S0..S4
        hours = [1.8, 9.1, 0.2, 0.4, 3.4]
        counts = [int(h * 360) for h in hours]  # desk-scaled
        samples = []
        tl = make_timeline([INTERICTAL] * 40)
        t = 0
        for k, n in enumerate(counts):
            for _ in range(n):
                samples.append(SequenceSample(tl, t, 0, k, "r"))
                t += 50
            for _ in range(30):
                samples.append(SequenceSample(tl, t, 1, k, "r"))
                t += 50
        folds = split_seizure_independent(samples, list(range(5)))
        assert len(folds) == 5
        for k, fold in enumerate(folds):
            test_inter = [s for s in fold.test if s.label == 0]
            assert len(test_inter) == counts[k]
            assert all(s.seizure_index == k for s in test_inter)

    def test_fewer_than_three_periods_rejected(self):
        samples = synthetic_samples(50, {0: 10, 1: 10})
        # all interictal precedes seizure 0: only one independent period
        with pytest.raises(DivisionError, match="3"):
            split_seizure_independent(samples, [0, 1])

    def test_trailing_interictal_rides_last_fold(self):
        tl = make_timeline([INTERICTAL] * 40)
        samples = []
        for k in range(3):
            samples += [SequenceSample(tl, 1000 * k + i, 0, k, "r") for i in range(5)]
            samples += [SequenceSample(tl, 1000 * k + 500 + i, 1, k, "r") for i in range(3)]
        samples += [SequenceSample(tl, 9000 + i, 0, -1, "r") for i in range(4)]
        folds = split_seizure_independent(samples, [0, 1, 2])
        tail = [s for s in folds[2].test if s.seizure_index == -1]
        assert len(tail) == 4

    def test_preictal_only_fold_flagged(self):
        tl = make_timeline([INTERICTAL] * 40)
        samples = []
        for k in range(3):
            samples += [SequenceSample(tl, 1000 * k + i, 0, k, "r") for i in range(5)]
            samples += [SequenceSample(tl, 1000 * k + 500 + i, 1, k, "r") for i in range(3)]
        # seizure 3 has preictal but an empty preceding span
        samples += [SequenceSample(tl, 3500 + i, 1, 3, "r") for i in range(3)]
        folds = split_seizure_independent(samples, [0, 1, 2, 3])
        assert folds[3].preictal_only
        assert all(not f.preictal_only for f in folds[:3])


class TestQualifyingSeizures:
    def test_short_preictal_span_omitted(self):
        merged = [MergedSeizure(500, 520), MergedSeizure(9000, 9020)]
        # first onset leaves only 320 s of preictal window inside the record
        keep = qualifying_seizures(merged, duration_s=20000)
        assert keep == [1]

    def test_half_window_kept(self):
        merged = [MergedSeizure(180 + 900 + 20, 1120)]
        keep = qualifying_seizures(merged, duration_s=20000)
        assert keep == [0]


class TestBalance:
    def test_undersample_to_one_to_one(self):
        samples = synthetic_samples(1000, {0: 100})
        out, weights = balance(samples, "undersample", rng_seed=1)
        labels = [s.label for s in out]
        assert labels.count(0) == labels.count(1) == 100
        assert weights == (1.0, 1.0)

    def test_already_balanced_unchanged(self):
        samples = synthetic_samples(50, {0: 50})
        out, _ = balance(samples, "undersample", rng_seed=1)
        assert sorted(s.anchor_s for s in out) == sorted(s.anchor_s for s in samples)

    def test_weighted_policy_formula(self):
        samples = synthetic_samples(900, {0: 100})
        out, weights = balance(samples, "weighted", rng_seed=1)
        assert len(out) == 1000
        np.testing.assert_allclose(weights, (0.2, 1.8), rtol=1e-12)
        np.testing.assert_allclose(np.mean(weights), 1.0)

    def test_missing_class_named(self):
        tl = make_timeline([INTERICTAL] * 40)
        only_neg = [SequenceSample(tl, i, 0, 0, "r") for i in range(5)]
        with pytest.raises(BalanceError, match="preictal"):
            balance(only_neg, "undersample")

    def test_deterministic(self):
        samples = synthetic_samples(300, {0: 40})
        a, _ = balance(samples, "undersample", rng_seed=9)
        b, _ = balance(samples, "undersample", rng_seed=9)
        assert [s.anchor_s for s in a] == [s.anchor_s for s in b]


def test_fold_manifest_format(tmp_path):
    samples = synthetic_samples(20, {0: 5, 1: 5})
    folds = split_even(samples, [0, 1])
    path = tmp_path / "folds.manifest"
    write_fold_manifest(folds, path)
    lines = path.read_text().splitlines()
    assert len(lines) == sum(len(f.train) + len(f.test) for f in folds)
    rec, anchor, label, fold_id, role = lines[0].split()
    assert rec == "r" and role in ("train", "test")
    int(anchor), int(label), int(fold_id)
