"""Command-line front end: ``gaze-emb <command> --config <path> [--set k=v ...] --out <dir>``.

Stages communicate only through files: ``synth`` writes canonical recordings,
``prep`` turns recordings into velocity windows, ``train`` writes fold
checkpoints, ``embed`` and ``eval`` consume windows plus checkpoints, and
``quality`` / ``plot`` produce the signal-quality and figure artifacts.

Exit status is 0 on success, 2 for usage or configuration errors and 1 for
any runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import REGISTRY, ConfigError, RunConfig, load_config
from .data import GazeDataError, read_recordings, recording_filename, synth_dataset, write_recording
from .evaluate import (
    EvalError,
    ensemble_embed_windows,
    evaluate,
    read_roc,
    read_scores,
    write_report,
)
from .net import ModelCheckpoint, NetError
from .prep import PrepError, preprocess_recording, read_windows, write_windows
from .quality import (
    QualityError,
    kde,
    read_density_csv,
    read_fixation_csv,
    spatial_accuracy,
    spatial_precision,
    target_segments,
    write_density_csv,
    write_metrics_csv,
)
from .train import FoldAssignment, TrainError, assign_folds, train_fold, write_train_log

COMMANDS = ("synth", "prep", "train", "embed", "eval", "quality", "plot")
RUNTIME_ERRORS = (GazeDataError, PrepError, NetError, TrainError, EvalError, QualityError, OSError)


class StageError(RuntimeError):
    pass


def _input(cfg: RunConfig, key: str) -> Path:
    if not cfg[key]:
        raise ConfigError(f"{key} must be set for this command")
    return Path(cfg[key])


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# stages


def run_synth(cfg: RunConfig, out: Path) -> None:
    recs = synth_dataset(
        cfg["synth.n_subjects"], tasks=cfg["synth.tasks"], duration_s=cfg["synth.duration_s"],
        rate_hz=cfg["synth.rate_hz"], eyes=cfg["synth.eyes"], n_long_term=cfg["synth.n_long_term"],
        long_term_round=cfg["synth.long_term_round"], sessions=cfg["synth.sessions"], seed=cfg.seed,
    )
    for rec in recs:
        write_recording(rec, out / recording_filename(rec.meta))
    _say(f"synth: {len(recs)} recordings for {cfg['synth.n_subjects']} subjects -> {out}")


def run_prep(cfg: RunConfig, out: Path) -> None:
    src = _require(_input(cfg, "paths.recordings"), "recordings directory")
    recs = read_recordings(src)
    if not recs:
        raise StageError(f"no recordings found in {src}")
    pc = cfg.prep_config()
    windows = [w for rec in recs for w in preprocess_recording(rec, pc)]
    if not windows:
        raise StageError("no complete windows; recordings are shorter than one window")
    write_windows(windows, out / "windows.bin")
    nan = float(np.mean([w.nan_fraction for w in windows]))
    _say(f"prep: {len(windows)} windows from {len(recs)} recordings, mean NaN fraction {nan:.4f} -> {out}")


def _load_windows(cfg: RunConfig):
    return read_windows(_require(_input(cfg, "paths.windows"), "windows file"))


def _held_out(cfg: RunConfig, subjects: list[str]) -> list[str]:
    held = set(cfg["split.held_out"])
    unknown = held - set(subjects)
    if unknown:
        raise StageError(f"held-out subject(s) not in the data: {', '.join(sorted(unknown))}")
    n = cfg["split.n_held_out"]
    if n:
        held |= set([s for s in subjects if s not in held][-n:])
    return sorted(held)


def run_train(cfg: RunConfig, out: Path) -> None:
    windows = _load_windows(cfg)
    rounds, excluded = set(cfg["train.rounds"]), set(cfg["train.exclude_tasks"])
    pool = [w for w in windows
            if (not rounds or w.source.round in rounds) and w.source.task not in excluded]
    if not pool:
        raise StageError("training pool is empty after round/task filtering")
    channels = {w.channels.shape[0] for w in pool}
    if len(channels) != 1:
        raise StageError(f"windows mix channel counts {sorted(channels)}; set prep.eyes")
    counts = Counter(s for s, _, _, _ in {w.source[:4] for w in pool})
    subjects = sorted(counts)
    fa = assign_folds(counts, cfg["split.k"], _held_out(cfg, subjects))
    (out / "folds.json").write_text(json.dumps(fa.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    net_cfg = cfg.net_config(channels.pop())
    train_cfg = cfg.train_config()
    folds = cfg["train.folds"] or tuple(range(fa.k))
    bad = [f for f in folds if not 0 <= f < fa.k]
    if bad:
        raise StageError(f"train.folds out of range for k={fa.k}: {bad}")
    log = []
    for f in folds:
        ckpt, history = train_fold(pool, fa, f, net_cfg, train_cfg)
        ckpt.save(out / f"fold{f}.ckpt")
        log.extend(history)
        print(f"train: fold {f} final loss {history[-1].train_loss:.4f} (val {history[-1].val_loss:.4f})",
              file=sys.stderr, flush=True)
    name = "train_log.csv" if set(folds) == set(range(fa.k)) else "train_log_folds" + "-".join(map(str, folds)) + ".csv"
    write_train_log(log, out / name)
    _say(f"train: {len(folds)} fold model(s), {len(subjects) - len(fa.held_out)} training subjects, "
         f"{len(fa.held_out)} held out -> {out}")


def _load_models(cfg: RunConfig) -> tuple[list[ModelCheckpoint], FoldAssignment]:
    root = _input(cfg, "paths.models")
    folds_path = root / "folds.json"
    k = cfg["split.k"]
    if folds_path.exists():
        fa = FoldAssignment.from_json(json.loads(folds_path.read_text(encoding="utf-8")))
        k = fa.k
    paths = [root / f"fold{f}.ckpt" for f in range(k)]
    for p in paths:
        _require(p, "checkpoint")
    _require(folds_path, "fold assignment")
    return [ModelCheckpoint.load(p) for p in paths], fa


def run_embed(cfg: RunConfig, out: Path) -> None:
    ckpts, _ = _load_models(cfg)
    windows = _load_windows(cfg)
    emb = ensemble_embed_windows(ckpts, windows)
    path = out / "embeddings.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "round", "session", "task", "window_index"] + [f"e{i}" for i in range(emb.shape[1])])
        for win, vec in zip(windows, emb):
            w.writerow(list(win.source) + [repr(float(v)) for v in vec])
    _say(f"embed: {len(windows)} windows x {emb.shape[1]} dims -> {path}")


def run_eval(cfg: RunConfig, out: Path) -> None:
    ckpts, fa = _load_models(cfg)
    windows = _load_windows(cfg)
    subjects = cfg["eval.subjects"] or sorted(fa.held_out)
    if not subjects:
        raise StageError("no held-out subjects to evaluate; set split.held_out when training or eval.subjects")
    task_rounds = [w.source.round for w in windows if w.source.task == cfg["eval.task"]]
    protocol = cfg.protocol(max(task_rounds) if task_rounds else None)
    report = evaluate(ckpts, windows, protocol, subjects, cfg["eval.far_target"])
    write_report(report, out)
    dp = "n/a" if report.d_prime is None else f"{report.d_prime:.3f}"
    _say(f"eval: {protocol.term}-term {protocol.task} EER {100 * report.eer:.2f}% d' {dp} "
         f"FRR@FAR {100 * report.frr_at_far:.2f}% (+-{100 * report.frr_std:.2f}) "
         f"over {len(report.subjects)} subjects -> {out}")


def _fixation_segments(cfg: RunConfig):
    if cfg["paths.fixations"]:
        src = _require(Path(cfg["paths.fixations"]), "fixation CSV path")
        files = sorted(src.glob("*.csv")) if src.is_dir() else [src]
        return [(f.stem, read_fixation_csv(f)) for f in files]
    src = _require(_input(cfg, "paths.recordings"), "recordings directory")
    segs = []
    for rec in read_recordings(src):
        for i, seg in enumerate(target_segments(rec, cfg["quality.settle_ms"])):
            segs.append((f"{recording_filename(rec.meta)[:-4]}#{i}", seg))
    return segs


def run_quality(cfg: RunConfig, out: Path) -> None:
    segs = _fixation_segments(cfg)
    if not segs:
        raise StageError("no fixation segments found")
    acc = np.array([spatial_accuracy(s) for _, s in segs])
    prec = np.array([spatial_precision(s, cfg["quality.method"]) for _, s in segs])
    with open(out / "segments.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "accuracy", "precision"])
        for (name, _), a, p in zip(segs, acc, prec):
            w.writerow([name, repr(float(a)), repr(float(p))])
    write_metrics_csv({
        "n_segments": len(segs),
        "accuracy_median": np.median(acc), "accuracy_mean": np.mean(acc),
        "precision_median": np.median(prec), "precision_mean": np.mean(prec),
    }, out / "quality_metrics.csv")
    write_density_csv(kde(acc), out / "density_accuracy.csv")
    write_density_csv(kde(prec), out / "density_precision.csv")
    _say(f"quality: {len(segs)} segments, median accuracy {np.median(acc):.3f} dva, "
         f"median precision {np.median(prec):.4f} dva -> {out}")


def run_plot(cfg: RunConfig, out: Path) -> None:
    from . import plots

    if not cfg["paths.eval"] and not cfg["paths.quality"]:
        raise ConfigError("plot needs paths.eval and/or paths.quality")
    made = []
    eval_dir = Path(cfg["paths.eval"] or "-")
    if cfg["paths.eval"] and (eval_dir / "roc.csv").exists():
        made.append(plots.plot_roc({"ensemble": read_roc(eval_dir / "roc.csv")}, out / "roc.svg"))
        made.append(plots.plot_scores(read_scores(eval_dir / "scores_genuine.csv"),
                                      read_scores(eval_dir / "scores_imposter.csv"), out / "scores.svg"))
    q_dir = Path(cfg["paths.quality"] or "-")
    if cfg["paths.quality"] and (q_dir / "quality_metrics.csv").exists():
        with open(q_dir / "quality_metrics.csv", newline="", encoding="utf-8") as fh:
            metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
        for name in ("accuracy", "precision"):
            curve = read_density_csv(q_dir / f"density_{name}.csv")
            made.append(plots.plot_densities({name: (curve, metrics[f"{name}_median"])},
                                             out / f"density_{name}.svg", f"spatial {name} (dva)"))
    if not made:
        raise StageError(f"nothing to plot: no roc.csv in {eval_dir} and no quality_metrics.csv in {q_dir}")
    _say(f"plot: {len(made)} figure(s) -> {out}")


STAGES = {
    "synth": run_synth, "prep": run_prep, "train": run_train, "embed": run_embed,
    "eval": run_eval, "quality": run_quality, "plot": run_plot,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:<24} {v.help} (default: {v.default or 'empty'})" for k, v in REGISTRY.items())
    parser = argparse.ArgumentParser(
        prog="gaze-emb",
        description="Eye-movement biometric embedding pipeline.",
        epilog="config keys:\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    parser.add_argument("--config", type=Path, help="flat 'key = value' config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"gaze-emb: config error: {exc}", file=sys.stderr)
        return 2
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{args.command}_config.txt").write_text(cfg.dump(), encoding="utf-8")
        STAGES[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"gaze-emb: config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, *RUNTIME_ERRORS) as exc:
        print(f"gaze-emb {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
