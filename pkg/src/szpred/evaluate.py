"""Event-based evaluation: persistence-gated alarms under SPH/SOP scoring.

A prediction is stamped at second t once the signal through second t has
arrived; it uses the sample anchored at t - 37 (19 feature vectors at
2-s spacing covering 38 s of signal).  Alarms fire at the first second
an uninterrupted positive run reaches the persistence threshold, gated
by a refractory period.  An alarm is correct when a merged onset o falls
in (t + SPH, t + SPH + SOP]; false alarms are counted only during
interictal-labeled seconds, and FPR divides by interictal hours.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import SEQ_LEN, SEQ_SPACING_S, MergedSeizure
from .features import EXCLUDED, ICTAL, INTERICTAL, LABEL_CODES, LABEL_NAMES, PREICTAL, FeatureTimeline
from .model import ModelParams, forward_batch
from .tensor import ShapeError

# A prediction at second t consumes signal through second t: its sample
# anchors 37 s earlier (the 38th second of signal completes the window).
PREDICTION_LAG_S = (SEQ_LEN - 1) * SEQ_SPACING_S + 1  # 37

DEFAULT_PERSISTENCE_S = 240
DEFAULT_REFRACTORY_S = 1800
DEFAULT_DECISION_THRESHOLD = 0.5


@dataclass
class ProbabilityTrace:
    times: np.ndarray          # seconds, strictly increasing by 1 within a run
    probabilities: np.ndarray
    positives: np.ndarray      # bool, prob >= threshold
    labels: np.ndarray         # period codes at each second
    threshold: float = DEFAULT_DECISION_THRESHOLD


@dataclass
class Alarm:
    trigger_time_s: int
    run_start_s: int


@dataclass
class EvalCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    interictal_hours: float = 0.0

    def add(self, other: "EvalCounts") -> None:
        self.tp += other.tp
        self.fn += other.fn
        self.fp += other.fp
        self.interictal_hours += other.interictal_hours


@dataclass
class PatientResult:
    patient_id: str
    counts: EvalCounts
    selection_status: str = ""
    selected_channels: list[int] = field(default_factory=list)
    post_counts: EvalCounts | None = None


def infer_stream(params: ModelParams, timeline: FeatureTimeline,
                 threshold: float = DEFAULT_DECISION_THRESHOLD,
                 channels: list[int] | None = None,
                 batch_size: int = 256) -> ProbabilityTrace:
    """Streaming inference over a whole timeline at a 1-s stride."""
    n = timeline.features.shape[0]
    window_stamps = (SEQ_LEN - 1) * SEQ_SPACING_S + 1  # 37
    if n < window_stamps:
        raise ShapeError(
            f"timeline has {n} stamps, needs {window_stamps} for one window"
        )
    anchors = np.arange(0, n - window_stamps + 1)
    probs, _ = infer_anchors(params, timeline, anchors, channels, batch_size)
    times = anchors + PREDICTION_LAG_S
    track = timeline.second_labels
    labels = track[np.minimum(times, len(track) - 1)]
    return ProbabilityTrace(
        times=times,
        probabilities=probs,
        positives=probs >= threshold,
        labels=labels.astype(np.int8),
        threshold=threshold,
    )


def infer_anchors(params: ModelParams, timeline: FeatureTimeline,
                  anchors: np.ndarray, channels: list[int] | None = None,
                  batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and attention rows for samples at the given anchors."""
    feats = timeline.features
    span = (SEQ_LEN - 1) * SEQ_SPACING_S + 1
    probs = np.empty(len(anchors), dtype=np.float64)
    atts = np.empty((len(anchors), params.config.n_channels), dtype=np.float64)
    with T.no_grad():
        for start in range(0, len(anchors), batch_size):
            group = anchors[start:start + batch_size]
            batch = np.stack([feats[a:a + span:SEQ_SPACING_S] for a in group])
            batch = batch.transpose(0, 2, 1, 3)
            if channels is not None:
                batch = batch[:, channels, :, :]
            logits, att = forward_batch(np.ascontiguousarray(batch), params)
            probs[start:start + len(group)] = T.sigmoid(logits).data
            atts[start:start + len(group)] = att
    return probs, atts


def alarms_from_trace(trace: ProbabilityTrace,
                      persistence_s: int = DEFAULT_PERSISTENCE_S,
                      refractory_s: int = DEFAULT_REFRACTORY_S) -> list[Alarm]:
    """Persistence-gated alarms with a refractory hold-off.

    An alarm fires at second t when the uninterrupted positive run
    through t has length >= persistence_s and the previous alarm is at
    least refractory_s old.  Any negative (or a gap in the time grid)
    breaks the run.
    """
    if persistence_s < 1:
        raise ValueError(f"persistence must be >= 1 s, got {persistence_s}")
    alarms: list[Alarm] = []
    run = 0
    prev_t = None
    last_fire = -math.inf
    for t, positive in zip(trace.times.tolist(), trace.positives.tolist()):
        if prev_t is not None and t != prev_t + 1:
            run = 0
        prev_t = t
        run = run + 1 if positive else 0
        if run >= persistence_s and t - last_fire >= refractory_s:
            alarms.append(Alarm(trigger_time_s=t, run_start_s=t - run + 1))
            last_fire = t
    return alarms


def score_events(alarms: list[Alarm], merged: list[MergedSeizure],
                 labels: np.ndarray | ProbabilityTrace,
                 sph_s: float = 180, sop_s: float = 1800,
                 all_onsets: list[float] | None = None) -> EvalCounts:
    """TP/FN over ``merged`` and FP/hours over the labeled seconds.

    ``labels`` supplies the per-second codes of exactly the seconds that
    were evaluated (a trace, or a full record track).  Alarm correctness
    is checked against ``all_onsets`` when given (so an alarm predicting
    a non-evaluated seizure is still not false), else against ``merged``.
    """
    if isinstance(labels, ProbabilityTrace):
        label_array = labels.labels
        label_times = labels.times
    else:
        label_array = np.asarray(labels)
        label_times = np.arange(len(label_array))
    onsets = list(all_onsets) if all_onsets is not None else [s.onset_s for s in merged]

    label_at = dict(zip(label_times.tolist(), label_array.tolist()))
    predicted: set[float] = set()
    fp = 0
    for alarm in alarms:
        t = alarm.trigger_time_s
        hits = [o for o in onsets if t + sph_s < o <= t + sph_s + sop_s]
        if hits:
            predicted.update(hits)
        elif label_at.get(t) == INTERICTAL:
            fp += 1
    tp = sum(1 for s in merged if s.onset_s in predicted)
    fn = len(merged) - tp
    hours = float((label_array == INTERICTAL).sum()) / 3600.0
    return EvalCounts(tp=tp, fn=fn, fp=fp, interictal_hours=hours)


def sensitivity(c: EvalCounts) -> float:
    """TP / (TP + FN) in percent; NaN when no seizure was evaluable."""
    total = c.tp + c.fn
    if total == 0:
        return math.nan
    return 100.0 * c.tp / total


def fpr(c: EvalCounts) -> float:
    """False alarms per interictal hour; NaN without interictal data."""
    if c.interictal_hours <= 0:
        return math.nan
    return c.fp / c.interictal_hours


def aggregate(results: list[PatientResult], mode: str,
              post_selection: bool = False) -> tuple[float, float]:
    """(sensitivity %, FPR/h) over patients.

    Mean: unweighted average of per-patient metrics.  All: recomputed
    from pooled counts.  Patients without the requested counts (e.g.
    failed selection when ``post_selection``) are skipped.
    """
    counts = []
    for r in results:
        c = r.post_counts if post_selection else r.counts
        if c is not None:
            counts.append(c)
    if not counts:
        return math.nan, math.nan
    if mode == "Mean":
        sens = [sensitivity(c) for c in counts]
        rates = [fpr(c) for c in counts]
        sens = [s for s in sens if not math.isnan(s)]
        rates = [r for r in rates if not math.isnan(r)]
        return (float(np.mean(sens)) if sens else math.nan,
                float(np.mean(rates)) if rates else math.nan)
    if mode == "All":
        pooled = EvalCounts()
        for c in counts:
            pooled.add(c)
        return sensitivity(pooled), fpr(pooled)
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# file formats


def write_trace_csv(trace: ProbabilityTrace, path) -> None:
    """Rows of ``t_s,probability,positive,label``; full float precision."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_s", "probability", "positive", "label"])
        for t, p, pos, lab in zip(trace.times, trace.probabilities,
                                  trace.positives, trace.labels):
            writer.writerow([int(t), repr(float(p)), int(pos), LABEL_NAMES[int(lab)]])


def read_trace_csv(path, threshold: float = DEFAULT_DECISION_THRESHOLD) -> ProbabilityTrace:
    times, probs, positives, labels = [], [], [], []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["t_s", "probability", "positive", "label"]:
            raise ValueError(f"{path}: unexpected trace header {header}")
        for row in reader:
            times.append(int(row[0]))
            probs.append(float(row[1]))
            positives.append(bool(int(row[2])))
            labels.append(LABEL_CODES[row[3]])
    return ProbabilityTrace(
        times=np.array(times, dtype=np.int64),
        probabilities=np.array(probs, dtype=np.float64),
        positives=np.array(positives, dtype=bool),
        labels=np.array(labels, dtype=np.int8),
        threshold=threshold,
    )


def _metric_cell(value: float, fmt: str) -> str:
    return "N/A" if math.isnan(value) else fmt.format(value)


def write_report_csv(results: list[PatientResult], path,
                     parameter_count: int, config_lines: list[str] | None = None) -> None:
    """Per-patient rows plus Mean and All rows, Table-style columns."""
    with open(Path(path), "w", newline="") as fh:
        fh.write(f"# trainable_parameters = {parameter_count}\n")
        for line in config_lines or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["patient", "fpr_per_h", "sensitivity_pct",
                         "selected_channels", "fpr_per_h_selected",
                         "sensitivity_pct_selected"])
        for r in results:
            if r.post_counts is not None:
                chans = ",".join(str(c) for c in r.selected_channels)
                post_fpr = _metric_cell(fpr(r.post_counts), "{:.3f}")
                post_sen = _metric_cell(sensitivity(r.post_counts), "{:.1f}")
            else:
                chans = r.selection_status or "Failed"
                post_fpr = post_sen = ""
            writer.writerow([
                r.patient_id,
                _metric_cell(fpr(r.counts), "{:.3f}"),
                _metric_cell(sensitivity(r.counts), "{:.1f}"),
                chans, post_fpr, post_sen,
            ])
        for mode in ("Mean", "All"):
            sen, rate = aggregate(results, mode)
            post_sen_v, post_rate_v = aggregate(results, mode, post_selection=True)
            writer.writerow([
                mode,
                _metric_cell(rate, "{:.3f}"), _metric_cell(sen, "{:.1f}"),
                "",
                _metric_cell(post_rate_v, "{:.3f}"), _metric_cell(post_sen_v, "{:.1f}"),
            ])


def plot_trace_svg(trace: ProbabilityTrace, alarms: list[Alarm], path) -> None:
    """Probability vs time with preictal spans shaded and alarms marked."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(10, 3))
    t = trace.times
    ax.plot(t, trace.probabilities, lw=0.8, color="tab:blue", label="probability")
    pre = trace.labels == PREICTAL
    if pre.any():
        ax.fill_between(t, 0, 1, where=pre, color="tab:orange", alpha=0.25,
                        label="preictal")
    for i, alarm in enumerate(alarms):
        ax.axvline(alarm.trigger_time_s, color="tab:red", lw=1.2,
                   label="alarm" if i == 0 else None)
    ax.axhline(trace.threshold, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("p(preictal)")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), format="svg")
    plt.close(fig)
