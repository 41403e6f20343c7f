"""Command-line interface.

Subcommands: synth (emit a synthetic cohort), features (record ->
feature cache), train (one fold), select (accumulate attention over fold
test data and pick channels), eval (trace -> event metrics), run (full
experiment), plot (trace -> SVG).  All read a key=value config file plus
``--set key=value`` overrides; exit code 0 on success, 2 on usage
errors, 1 otherwise with a machine-parsable ``error: ...`` line.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset, evaluate, features, model, pipeline, synth
from .config import ConfigError, ExperimentConfig, apply_config_file, apply_overrides
from .records import (
    AnnotationError, RecordError, load_annotations, save_annotations,
    write_csv_record,
)
from .train import TrainingError, retrain_selected


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        apply_config_file(cfg, args.config)
    apply_overrides(cfg, getattr(args, "set", None) or [])
    if getattr(args, "division", None):
        cfg.division = args.division
    return cfg


def _parse_channels(text: str | None) -> list[int] | None:
    if not text:
        return None
    return [int(c) for c in text.split(",") if c != ""]


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scale = args.scale
    sph = max(int(round(180 * scale)), 2)
    sop = max(int(round(1800 * scale)), 20)
    exclusion = max(int(round(3600 * scale)), sph + sop)
    persistence = max(int(round(240 * scale)), 5)
    refractory = max(int(round(1800 * scale)), persistence)
    interictal = args.interictal_s if args.interictal_s else int(round(18000 * scale))

    dur = args.seizure_duration_s
    head = interictal + exclusion
    spacing = dur + 2 * exclusion + interictal
    onsets = [head + k * spacing for k in range(args.seizures)]
    duration = onsets[-1] + dur + exclusion + interictal

    informative = tuple(_parse_channels(args.informative) or ())
    for p in range(args.patients):
        spec = synth.SynthSpec(
            n_channels=args.channels,
            duration_s=duration,
            sampling_rate=args.fs,
            seizure_times=tuple(float(o) for o in onsets),
            seizure_duration_s=dur,
            informative_channels=informative,
            preictal_band=args.band,
            preictal_gain=args.gain,
            persistent_fraction=args.persistent_fraction,
            noise_level=args.noise,
            rng_seed=args.seed + p,
            sph_s=sph,
            sop_s=sop,
        )
        record, ann = synth.synth_generate(spec)
        pdir = out / f"patient{p:02d}"
        pdir.mkdir(exist_ok=True)
        write_csv_record(record, pdir / "rec0.csv")
        save_annotations(ann, pdir / "rec0.ann")

    cfg = ExperimentConfig(
        data_dir=str(out),
        output_dir=str(out / "runs"),
        division="even",
        rng_seed=args.seed,
        sampling_rate=args.fs,
        sph_s=sph, sop_s=sop, exclusion_s=exclusion, merge_gap_s=exclusion,
    )
    cfg.model = replace(cfg.model, n_channels=args.channels,
                        dim_temporal=args.dim, dim_output=args.dim,
                        d_k=args.dim, d_v=args.dim, heads=args.heads)
    cfg.train = replace(cfg.train, max_epochs=args.max_epochs,
                        early_stop_patience=args.patience)
    cfg.select = replace(cfg.select, dominance_factor=args.dominance_factor,
                         fail_factor=args.fail_factor)
    cfg.eval = replace(cfg.eval, persistence_s=persistence,
                       refractory_s=refractory)
    (out / "exp.cfg").write_text(cfg.to_text())
    print(f"cohort: {args.patients} patients, {args.seizures} seizures each, "
          f"duration {duration} s, config {out / 'exp.cfg'}")
    return 0


# ---------------------------------------------------------------------------
# features


def cmd_features(args) -> int:
    cfg = _load_config(args)
    record = pipeline.load_record(Path(args.record), cfg)
    track = None
    if args.ann:
        ann = load_annotations(args.ann)
        merged = dataset.merge_seizures(ann, cfg.merge_gap_s)
        track = dataset.label_timeline(record.duration_s, merged, cfg.sph_s,
                                       cfg.sop_s, cfg.exclusion_s).track
    tl = features.extract_timeline(record, second_labels=track)
    features.write_feature_cache(tl, args.out)
    print(f"features: {tl.features.shape[0]} stamps x {tl.features.shape[1]} "
          f"channels x {tl.features.shape[2]} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train / select


def _locate_patient(cfg: ExperimentConfig, patient: str):
    dirs = sorted(p for p in Path(cfg.data_dir).iterdir() if p.is_dir())
    for idx, pdir in enumerate(dirs):
        if pdir.name == patient:
            return idx, pdir
    raise RecordError(f"patient {patient!r} not found under {cfg.data_dir}")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    idx, pdir = _locate_patient(cfg, args.patient)
    bundle = pipeline.load_patient(pdir, cfg)
    folds = pipeline.divide(bundle, cfg)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"fold {args.fold} outside [0, {len(folds)})")
    fold = folds[args.fold]
    channels = _parse_channels(args.channels)
    if channels is None:
        trained = pipeline.train_fold(bundle, fold, cfg, idx, args.fold)
    else:
        selection = model.ChannelSelection(
            status="Selected", channels=channels,
            attention_acc=np.zeros(bundle.n_channels))
        model_cfg = replace(cfg.model, n_channels=bundle.n_channels)
        trained = retrain_selected(
            fold, selection, model_cfg, pipeline.fold_train_config(cfg, idx, args.fold))
    model.save_checkpoint(trained.params, args.out)
    counts = pipeline.evaluate_fold(bundle, fold, trained.params, cfg,
                                    channels=channels)
    last = trained.history[-1]
    print(f"trained fold {args.fold}: epochs={len(trained.history)} "
          f"best={trained.best_epoch} val_loss={last.val_loss:.4f} "
          f"tp={counts.tp} fn={counts.fn} fp={counts.fp} -> {args.out}")
    return 0


def cmd_select(args) -> int:
    cfg = _load_config(args)
    idx, pdir = _locate_patient(cfg, args.patient)
    bundle = pipeline.load_patient(pdir, cfg)
    folds = pipeline.divide(bundle, cfg)
    if len(args.checkpoint) != len(folds):
        raise ConfigError(
            f"{len(args.checkpoint)} checkpoints for {len(folds)} folds")
    acc = model.AttentionAccumulator(bundle.n_channels)
    for fold, ckpt in zip(folds, args.checkpoint):
        params = model.load_checkpoint(ckpt)
        pipeline.evaluate_fold(bundle, fold, params, cfg, acc=acc)
    attention = model.finalize_attention(acc)
    selection = model.select_channels(attention, cfg.select)
    payload = {
        "status": selection.status,
        "channels": selection.channels,
        "attention": [float(a) for a in attention],
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2))
    print(f"selection: {selection.status} "
          f"channels={','.join(map(str, selection.channels)) or '-'}")
    return 0


# ---------------------------------------------------------------------------
# eval / run / plot


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    trace = evaluate.read_trace_csv(args.trace, cfg.eval.decision_threshold)
    ann = load_annotations(args.ann)
    merged = dataset.merge_seizures(ann, cfg.merge_gap_s)
    alarms = evaluate.alarms_from_trace(trace, cfg.eval.persistence_s,
                                        cfg.eval.refractory_s)
    counts = evaluate.score_events(alarms, merged, trace, cfg.sph_s, cfg.sop_s)
    sen = evaluate.sensitivity(counts)
    rate = evaluate.fpr(counts)
    print(f"alarms={len(alarms)} tp={counts.tp} fn={counts.fn} fp={counts.fp} "
          f"interictal_h={counts.interictal_hours:.3f} "
          f"sen={'N/A' if sen != sen else f'{sen:.1f}%'} "
          f"fpr={'N/A' if rate != rate else f'{rate:.3f}/h'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    run_dir, results = pipeline.run_experiment(cfg, run_name=args.run_name)
    for mode in ("Mean", "All"):
        sen, rate = evaluate.aggregate(results, mode)
        print(f"{mode}: sen={'N/A' if sen != sen else f'{sen:.1f}%'} "
              f"fpr={'N/A' if rate != rate else f'{rate:.3f}/h'} "
              f"({len(results)} patients)")
    print(f"report: {run_dir / 'report.csv'}")
    return 0


def cmd_plot(args) -> int:
    cfg = _load_config(args)
    trace = evaluate.read_trace_csv(args.trace, cfg.eval.decision_threshold)
    alarms = evaluate.alarms_from_trace(trace, cfg.eval.persistence_s,
                                        cfg.eval.refractory_s)
    out = args.out or str(Path(args.trace).with_suffix(".svg"))
    evaluate.plot_trace_svg(trace, alarms, out)
    print(f"plot: {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="szpred")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--division", choices=["even", "seizure-independent"])

    p = sub.add_parser("synth", help="emit a synthetic labeled cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=3)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--informative", default="2,5")
    p.add_argument("--seizures", type=int, default=4)
    p.add_argument("--seizure-duration-s", type=int, default=10)
    p.add_argument("--interictal-s", type=int, default=0,
                   help="interictal span between seizures (0 = scaled default)")
    p.add_argument("--band", default="alpha", choices=sorted(features.BAND_NAMES))
    p.add_argument("--gain", type=float, default=4.0)
    p.add_argument("--persistent-fraction", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--fs", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scale", type=float, default=0.1,
                   help="time-constant scale for desk-size experiments")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--max-epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=8)
    p.add_argument("--dominance-factor", type=float, default=1.2)
    p.add_argument("--fail-factor", type=float, default=1.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract a feature cache from a record")
    common(p)
    p.add_argument("--record", required=True)
    p.add_argument("--ann")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one fold")
    common(p)
    p.add_argument("--patient", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--channels", help="comma-separated subset for retraining")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="accumulate attention and select channels")
    common(p)
    p.add_argument("--patient", required=True)
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="one checkpoint per fold, in fold order")
    p.add_argument("--out", help="selection JSON path")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="score a trace CSV event-based")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--ann", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full experiment over a cohort")
    common(p)
    p.add_argument("--run-name", help="run directory name (default timestamped)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot", help="trace CSV to SVG")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RecordError, AnnotationError, TrainingError,
            pipeline.PatientError, dataset.DivisionError, dataset.BalanceError,
            synth.SynthSpecError, model.CheckpointError, model.SelectionError,
            features.SegmentationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
