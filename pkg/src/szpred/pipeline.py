"""End-to-end experiment orchestration.

Per patient: ingest records, extract features, merge/label seizures,
divide into folds, train each fold, stream-infer its test data while
accumulating channel attention, select dominant channels per patient,
retrain on the reduced montage when selection succeeds, and evaluate
both passes.  Patients are independent work units; a failing patient is
logged and skipped, the run continues.

Records of one patient are treated as disjoint time bases: seizures
never merge across record files, and each record's interictal spans are
assigned to the next seizure in record order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataset, evaluate, features, model, train
from .config import ExperimentConfig
from .dataset import Fold, MergedSeizure, SequenceSample
from .edf import read_edf
from .evaluate import (
    Alarm, EvalCounts, PatientResult, ProbabilityTrace, PREDICTION_LAG_S,
    alarms_from_trace, infer_anchors, score_events, write_report_csv,
    write_trace_csv,
)
from .features import FeatureTimeline
from .model import (
    AttentionAccumulator, ChannelSelection, ModelParams, count_parameters,
    finalize_attention, select_channels,
)
from .records import RecordError, load_annotations, read_csv_record
from .train import TrainConfig, TrainedModel, fit, retrain_selected


class PatientError(RuntimeError):
    """This patient cannot be processed; the run continues without it."""


@dataclass
class RecordBundle:
    record_id: str
    timeline: FeatureTimeline
    track: np.ndarray
    onsets: list[float]                      # all merged onsets, record time
    merged_local: list[MergedSeizure]


@dataclass
class PatientBundle:
    patient_id: str
    channel_labels: list[str]
    records: dict[str, RecordBundle]
    merged: list[MergedSeizure]              # global indexing across records
    seizure_record: list[str]                # record id per global seizure
    qualifying: list[int]
    samples: list[SequenceSample]

    @property
    def n_channels(self) -> int:
        return len(self.channel_labels)


def load_record(path: Path, ecfg: ExperimentConfig):
    if path.suffix.lower() == ".edf":
        return read_edf(path)
    return read_csv_record(path, sampling_rate=ecfg.sampling_rate)


def load_patient(patient_dir: Path, ecfg: ExperimentConfig) -> PatientBundle:
    patient_dir = Path(patient_dir)
    record_paths = sorted(
        p for p in patient_dir.iterdir()
        if p.suffix.lower() in (".csv", ".edf")
    )
    if not record_paths:
        raise PatientError(f"{patient_dir}: no .csv or .edf records")

    records: dict[str, RecordBundle] = {}
    merged_global: list[MergedSeizure] = []
    seizure_record: list[str] = []
    qualifying: list[int] = []
    samples: list[SequenceSample] = []
    labels_ref: list[str] | None = None

    per_record = []
    for path in record_paths:
        record = load_record(path, ecfg)
        if record.duration_s < dataset.SEQ_SPAN_S:
            raise PatientError(
                f"{path}: {record.duration_s:.0f} s is shorter than one "
                f"{dataset.SEQ_SPAN_S}-s model window"
            )
        if labels_ref is None:
            labels_ref = record.channel_labels
        elif record.channel_labels != labels_ref:
            raise PatientError(f"{path}: channel labels differ between records")
        ann_path = path.with_suffix(".ann")
        if not ann_path.exists():
            raise PatientError(f"{path}: missing annotation sidecar {ann_path.name}")
        ann = load_annotations(ann_path, patient_id=patient_dir.name)
        per_record.append((path.stem, record, ann))

    for record_id, record, ann in per_record:
        merged_local = dataset.merge_seizures(ann, ecfg.merge_gap_s)
        track = dataset.label_timeline(
            record.duration_s, merged_local,
            sph_s=ecfg.sph_s, sop_s=ecfg.sop_s, exclusion_s=ecfg.exclusion_s,
        ).track
        timeline = features.extract_timeline(record, second_labels=track)
        local_samples = dataset.build_sequences(timeline, merged_local, record_id)

        offset = len(merged_global)
        local_qualifying = dataset.qualifying_seizures(
            merged_local, record.duration_s,
            sph_s=ecfg.sph_s, sop_s=ecfg.sop_s,
            min_fraction=ecfg.min_preictal_fraction,
        )
        for s in local_samples:
            if s.seizure_index != -1:
                s.seizure_index += offset
            else:
                s.seizure_index = offset + len(merged_local)  # fixed up below
        merged_global.extend(merged_local)
        seizure_record.extend([record_id] * len(merged_local))
        qualifying.extend(offset + k for k in local_qualifying)
        samples.extend(local_samples)
        records[record_id] = RecordBundle(
            record_id=record_id, timeline=timeline, track=track,
            onsets=[m.onset_s for m in merged_local], merged_local=merged_local,
        )

    total = len(merged_global)
    for s in samples:  # spans trailing a record attach to the next record's seizures
        if s.seizure_index >= total:
            s.seizure_index = -1

    return PatientBundle(
        patient_id=patient_dir.name,
        channel_labels=list(labels_ref),
        records=records,
        merged=merged_global,
        seizure_record=seizure_record,
        qualifying=qualifying,
        samples=samples,
    )


def divide(bundle: PatientBundle, ecfg: ExperimentConfig) -> list[Fold]:
    if ecfg.division == "even":
        return dataset.split_even(bundle.samples, bundle.qualifying)
    if ecfg.division == "seizure-independent":
        return dataset.split_seizure_independent(bundle.samples, bundle.qualifying)
    raise ValueError(f"unknown division {ecfg.division!r}")


def fold_train_config(ecfg: ExperimentConfig, patient_index: int,
                      fold_index: int) -> TrainConfig:
    """Per-fold seed derivation keeps folds and patients independent."""
    seed = ecfg.rng_seed + 100003 * patient_index + 101 * fold_index \
        + ecfg.train.rng_seed
    return replace(ecfg.train, rng_seed=seed)


def train_fold(bundle: PatientBundle, fold: Fold, ecfg: ExperimentConfig,
               patient_index: int, fold_index: int,
               log_path=None) -> TrainedModel:
    model_cfg = replace(ecfg.model, n_channels=bundle.n_channels)
    cfg = fold_train_config(ecfg, patient_index, fold_index)
    return fit(fold, model_cfg, cfg, log_path=log_path)


def _contiguous_runs(anchors: np.ndarray) -> list[np.ndarray]:
    if len(anchors) == 0:
        return []
    cuts = np.nonzero(np.diff(anchors) != 1)[0] + 1
    return np.split(anchors, cuts)


def evaluate_fold(bundle: PatientBundle, fold: Fold, params: ModelParams,
                  ecfg: ExperimentConfig, channels: list[int] | None = None,
                  acc: AttentionAccumulator | None = None,
                  traces_out: dict | None = None) -> EvalCounts:
    """Stream-infer the fold's test material and score it event-based.

    Alarm correctness is checked against every merged onset of the alarm's
    record; TP/FN are tallied for the held-out seizure only.
    """
    by_record: dict[str, list[SequenceSample]] = {}
    for s in fold.test:
        by_record.setdefault(s.record_id, []).append(s)

    heldout = bundle.merged[fold.held_out]
    heldout_record = bundle.seizure_record[fold.held_out]
    thr = ecfg.eval.decision_threshold
    counts = EvalCounts()
    for record_id in sorted(by_record):
        rb = bundle.records[record_id]
        anchors = np.array(sorted(s.anchor_s for s in by_record[record_id]))
        times_parts, probs_parts, labels_parts = [], [], []
        alarms: list[Alarm] = []
        for run in _contiguous_runs(anchors):
            probs, att = infer_anchors(params, rb.timeline, run, channels)
            if acc is not None:
                acc.add_batch(att)
            times = run + PREDICTION_LAG_S
            labels = rb.track[times]
            trace = ProbabilityTrace(times=times, probabilities=probs,
                                     positives=probs >= thr, labels=labels,
                                     threshold=thr)
            alarms.extend(alarms_from_trace(
                trace, ecfg.eval.persistence_s, ecfg.eval.refractory_s))
            times_parts.append(times)
            probs_parts.append(probs)
            labels_parts.append(labels)
        combined = ProbabilityTrace(
            times=np.concatenate(times_parts),
            probabilities=np.concatenate(probs_parts),
            positives=np.concatenate(probs_parts) >= thr,
            labels=np.concatenate(labels_parts),
            threshold=thr,
        )
        merged_here = [heldout] if record_id == heldout_record else []
        counts.add(score_events(
            alarms, merged_here, combined,
            sph_s=ecfg.sph_s, sop_s=ecfg.sop_s, all_onsets=rb.onsets,
        ))
        if traces_out is not None:
            traces_out[record_id] = (combined, alarms)
    return counts


def run_patient(patient_dir: Path, ecfg: ExperimentConfig, patient_index: int,
                out_dir: Path | None = None) -> PatientResult:
    bundle = load_patient(patient_dir, ecfg)
    try:
        folds = divide(bundle, ecfg)
    except dataset.DivisionError as exc:
        raise PatientError(f"{bundle.patient_id}: {exc}") from exc

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        dataset.write_fold_manifest(folds, out_dir / "folds.manifest")

    acc = AttentionAccumulator(bundle.n_channels)
    all_counts = EvalCounts()
    trained: list[TrainedModel] = []
    for k, fold in enumerate(folds):
        log = out_dir / f"fold{k}.train.log" if out_dir else None
        tm = train_fold(bundle, fold, ecfg, patient_index, k, log_path=log)
        trained.append(tm)
        traces = {} if (out_dir and ecfg.write_traces) else None
        all_counts.add(evaluate_fold(bundle, fold, tm.params, ecfg,
                                     acc=acc, traces_out=traces))
        if traces:
            for record_id, (trace, alarms) in traces.items():
                write_trace_csv(trace, out_dir / f"fold{k}.{record_id}.trace.csv")
                if ecfg.write_plots:
                    evaluate.plot_trace_svg(
                        trace, alarms, out_dir / f"fold{k}.{record_id}.trace.svg")

    attention = finalize_attention(acc)
    selection = select_channels(attention, ecfg.select)
    result = PatientResult(
        patient_id=bundle.patient_id,
        counts=all_counts,
        selection_status=selection.status,
        selected_channels=selection.channels,
    )

    if selection.selected:
        post = EvalCounts()
        model_cfg = replace(ecfg.model, n_channels=bundle.n_channels)
        for k, fold in enumerate(folds):
            cfg = fold_train_config(ecfg, patient_index, k)
            log = out_dir / f"fold{k}.retrain.log" if out_dir else None
            tm = retrain_selected(fold, selection, model_cfg, cfg, log_path=log)
            post.add(evaluate_fold(bundle, fold, tm.params, ecfg,
                                   channels=selection.channels))
        result.post_counts = post

    if out_dir is not None:
        payload = {
            "status": selection.status,
            "channels": selection.channels,
            "attention": [float(a) for a in selection.attention_acc],
            "channel_labels": bundle.channel_labels,
        }
        (out_dir / "selection.json").write_text(json.dumps(payload, indent=2))
    return result


def run_experiment(ecfg: ExperimentConfig,
                   run_name: str | None = None) -> tuple[Path, list[PatientResult]]:
    data_dir = Path(ecfg.data_dir)
    patient_dirs = sorted(p for p in data_dir.iterdir() if p.is_dir())
    if not patient_dirs:
        raise PatientError(f"{data_dir}: no patient directories")

    if run_name is None:
        run_name = time.strftime("run-%Y%m%d-%H%M%S")
    run_dir = Path(ecfg.output_dir) / run_name
    run_dir.mkdir(parents=True, exist_ok=False)
    (run_dir / "config.resolved.cfg").write_text(ecfg.to_text())

    log_lines: list[str] = []

    def one(idx_dir):
        idx, pdir = idx_dir
        try:
            return run_patient(pdir, ecfg, idx, out_dir=run_dir / pdir.name)
        except (PatientError, RecordError, dataset.DivisionError) as exc:
            return f"skipped {pdir.name}: {exc}"

    jobs = list(enumerate(patient_dirs))
    if ecfg.workers > 1:
        with ThreadPoolExecutor(max_workers=ecfg.workers) as pool:
            outcomes = list(pool.map(one, jobs))
    else:
        outcomes = [one(j) for j in jobs]

    results = []
    for outcome in outcomes:
        if isinstance(outcome, str):
            log_lines.append(outcome)
        else:
            results.append(outcome)

    param_count = count_parameters(model.init_model(ecfg.model, rng_seed=0))
    write_report_csv(results, run_dir / "report.csv", param_count,
                     config_lines=[f"division = {ecfg.division}",
                                   f"rng_seed = {ecfg.rng_seed}"])
    (run_dir / "run.log").write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
    return run_dir, results
