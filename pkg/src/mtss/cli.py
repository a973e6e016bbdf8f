"""Command-line entry point: ``mtss {synth,extract,pretrain,eval,ablate}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``MTSS_SEED``
sets the default seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .audio import AudioError
from .config import ConfigError, RunConfig
from .data import KINDS, Corpus, ManifestError, SynthSpec, generate_synthetic_corpus, split_counts
from .downstream import DownstreamError, Scenario, append_summary, run_trials
from .features import (
    Worker,
    compute_stats,
    extract_all,
    parse_workers,
    read_feature,
    workers_label,
    write_feature,
    write_stats,
)
from .pretrain import Checkpoint, PretrainError, digest_of, prepare_data, pretrain, reweighted_pipeline

log = logging.getLogger("mtss")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
BASELINE = "WLP"


class UsageError(Exception):
    pass


# -- argument types --------------------------------------------------------------

def _workers_arg(text: str) -> str:
    try:
        return workers_label(parse_workers(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _per_class_arg(text: str) -> tuple[int, int, int]:
    try:
        parts = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or TRAIN,VALID,TEST, got {text!r}") from None
    if len(parts) == 1:
        return split_counts(parts[0])
    if len(parts) == 3 and min(parts) >= 0:
        return tuple(parts)
    raise argparse.ArgumentTypeError(f"expected N or TRAIN,VALID,TEST, got {text!r}")


def _default_seed() -> int:
    raw = os.environ.get("MTSS_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MTSS_SEED must be an integer, got {raw!r}") from None


# -- shared setup -----------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.override("pretrain", seed=args.seed)


def _set_deterministic(enabled: bool) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _corpus(path) -> Corpus:
    if not path:
        raise UsageError("a corpus manifest is required (--corpus or [paths] corpus)")
    return Corpus.from_manifest(path)


# -- synth ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(kind=args.kind, n_classes=args.classes, per_class=args.per_class, clip_s=args.clip_s,
                     noise=args.noise, seed=args.seed)
    path = generate_synthetic_corpus(spec, args.out)
    print(f"wrote {path} ({sum(spec.per_class) * spec.n_classes} clips)")
    return EXIT_OK


# -- extract ----------------------------------------------------------------------

def _feature_path(root: Path, clip_id: str, worker: Worker) -> Path:
    return root / "features" / f"{clip_id}.{worker.value}.mtss"


def _extract_one(job):
    root, clip_id, audio_path, workers, spec, force = job
    from .audio import load_audio

    targets = [w for w in workers if w is not Worker.W]
    todo = [w for w in targets if force or not _feature_path(root, clip_id, w).exists()]
    if not todo:
        return clip_id, "skipped", None
    try:
        wave = load_audio(audio_path, spec.sr)
    except (AudioError, OSError, ValueError) as exc:
        return clip_id, "failed", str(exc)
    for w, fm in extract_all(wave, todo, spec).items():
        write_feature(_feature_path(root, clip_id, w), fm)
    return clip_id, "extracted", None


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    corpus = _corpus(args.corpus or cfg["paths"]["corpus"])
    root = Path(args.out or cfg["paths"]["features"] or "features")
    workers = parse_workers(args.workers)
    spec = cfg.extraction_spec()
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "stats").mkdir(parents=True, exist_ok=True)
    jobs = [(root, e.id, corpus.path(e), workers, spec, args.force) for e in corpus.entries]
    n_jobs = 1 if args.deterministic else max(1, args.jobs)
    start = time.perf_counter()
    counts = {"extracted": 0, "skipped": 0, "failed": 0}
    failed = set()
    if n_jobs == 1:
        results = map(_extract_one, jobs)
    else:
        pool = ProcessPoolExecutor(n_jobs)
        results = pool.map(_extract_one, jobs, chunksize=4)
    for i, (clip_id, status, err) in enumerate(results, 1):
        counts[status] += 1
        if status == "failed":
            failed.add(clip_id)
            log.warning("skipping %s: %s", clip_id, err)
        if args.progress and i % 50 == 0:
            print(f"  {i}/{len(jobs)} clips", file=sys.stderr)
    if n_jobs > 1:
        pool.shutdown()
    elapsed = max(time.perf_counter() - start, 1e-9)

    train = [e for e in corpus.split("train") if e.id not in failed]
    for w in workers:
        if w is Worker.W:
            continue
        mats = [read_feature(_feature_path(root, e.id, w)) for e in train]
        if mats:
            write_stats(root / "stats" / f"{w.value}.mtss", compute_stats(mats))
    print(f"extracted {counts['extracted']}, skipped {counts['skipped']}, failed {counts['failed']} "
          f"of {len(jobs)} clips in {elapsed:.1f}s ({counts['extracted'] / elapsed:.2f} clips/s)")
    return EXIT_OK


# -- pretrain ---------------------------------------------------------------------

def _pretrain_cfg(args, cfg: RunConfig):
    cfg = cfg.override("pretrain", workers=args.workers, epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, reweighted=True if args.reweighted else None,
                       normalize_targets=False if args.raw_targets else None)
    cfg = cfg.override("encoder", variant=args.encoder, scale="desk" if args.desk else None)
    return cfg


def _train(cfg: RunConfig, corpus: Corpus, out: Path, feature_dir=None) -> Checkpoint:
    pcfg = cfg.pretrain_config()
    data = prepare_data(pcfg, corpus, feature_dir)
    if cfg["pretrain"]["reweighted"]:
        ckpt = reweighted_pipeline(pcfg, out=out, data=data)
    else:
        ckpt = pretrain(pcfg, data, out)
    return ckpt


def cmd_pretrain(args) -> int:
    cfg = _pretrain_cfg(args, _run_config(args))
    corpus = _corpus(args.corpus or cfg["paths"]["corpus"])
    feature_dir = None if args.on_the_fly else (args.features or cfg["paths"]["features"] or None)
    out = Path(args.out or Path(cfg["paths"]["checkpoints"]) / workers_label(parse_workers(cfg["pretrain"]["workers"])))
    ckpt = _train(cfg, corpus, out, feature_dir)
    print(f"checkpoint {out} (epoch {ckpt.epoch}, {workers_label(ckpt.workers)}, {ckpt.weights.mechanism})")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------

def _report_dir(root: Path, dataset: str, scenario: str, workers: str, n) -> Path:
    return root / f"{dataset}_{scenario}_{workers}_{'all' if n is None else n}"


def _evaluate(cfg: RunConfig, corpus: Corpus, scenario: Scenario, ckpt: Checkpoint | None, reports: Path,
              seed: int, cache: dict) -> list[dict]:
    rows = []
    workers = workers_label(ckpt.workers) if ckpt else "none"
    weighting = ckpt.weights.mechanism if ckpt else "none"
    n_trials = cfg["downstream"]["trials"]
    for n in cfg.subsample_sizes():
        report = run_trials(scenario, corpus, ckpt, n_trials=n_trials, seed0=seed, subsample=n,
                            encoder_config=cfg.encoder_config(), settings=cfg.downstream_settings(), cache=cache)
        out = _report_dir(reports, corpus.name, scenario.value, workers, n)
        report.write_trials_csv(out / "trials.csv")
        report.write_confusion_csv(out / "confusion.csv")
        digest = digest_of({"run": cfg.digest(), "checkpoint": ckpt.config.digest() if ckpt else None,
                            "param": ckpt.param_digest() if ckpt else None, "seed": seed, "n": n})
        row = report.summary_row(corpus.name, workers, weighting, digest)
        append_summary(reports / "summary.csv", row)
        rows.append(row)
        print(f"{corpus.name} {scenario.value} {workers} n_train={report.n_train}: "
              f"macro F1 {report.mean:.4f} +/- {report.std:.4f} over {n_trials} trials")
    return rows


def cmd_eval(args) -> int:
    cfg = _run_config(args).override("downstream", scenario=args.scenario, trials=args.trials,
                                      subsample=args.subsample)
    cfg = cfg.override("encoder", variant=args.encoder, scale="desk" if args.desk else None)
    scenario = Scenario(cfg["downstream"]["scenario"])
    if scenario is Scenario.SUPERVISED and args.ckpt:
        raise UsageError("the supervised scenario trains from scratch; --ckpt is not allowed")
    if scenario is not Scenario.SUPERVISED and not args.ckpt:
        raise UsageError(f"the {scenario.value} scenario needs --ckpt")
    corpus = _corpus(args.corpus or cfg["paths"]["corpus"])
    ckpt = Checkpoint.load(args.ckpt) if args.ckpt else None
    reports = Path(args.reports or cfg["paths"]["reports"])
    _evaluate(cfg, corpus, scenario, ckpt, reports, args.seed, {})
    return EXIT_OK


# -- ablate -----------------------------------------------------------------------

def relative_improvement(f1: float, baseline: float) -> float:
    """Percent change of ``f1`` over the baseline score."""
    if baseline == 0:
        return float("nan")
    return 100.0 * (f1 - baseline) / baseline


def cmd_ablate(args) -> int:
    grid = [_workers_arg(g) for g in args.grid.split(",") if g.strip()]
    if BASELINE not in grid:
        raise UsageError(f"the ablation grid must include the {BASELINE} baseline")
    cfg = _pretrain_cfg(args, _run_config(args))
    cfg = cfg.override("downstream", scenario=args.scenario, trials=args.trials)
    scenario = Scenario(cfg["downstream"]["scenario"])
    if scenario is Scenario.SUPERVISED:
        raise UsageError("ablation compares pre-trained encoders; use frozen or fine_tuned")
    datasets = [_corpus(p) for p in args.corpus]
    pre_corpus = _corpus(args.pretrain_corpus) if args.pretrain_corpus else datasets[0]
    out = Path(args.out)
    results = {}
    for workers in grid:
        wcfg = cfg.override("pretrain", workers=workers)
        ck_dir = out / "checkpoints" / workers
        ckpt = None
        if ck_dir.exists():
            try:
                ckpt = Checkpoint.load(ck_dir)
            except PretrainError:
                ckpt = None
            if ckpt is not None and (ckpt.config.digest() != wcfg.pretrain_config().digest()
                                     or ckpt.epoch != wcfg.pretrain_config().epochs):
                ckpt = None
        if ckpt is None:
            ckpt = _train(wcfg, pre_corpus, ck_dir)
        for corpus in datasets:
            rows = _evaluate(wcfg.override("downstream", subsample=""), corpus, scenario, ckpt, out / "reports",
                             args.seed, {})
            results[(corpus.name, workers)] = (float(rows[0]["mean_f1"]), float(rows[0]["std_f1"]))

    lines = []
    for dataset in sorted({d for d, _ in results}):
        base = results[(dataset, BASELINE)][0]
        for workers in sorted(grid):
            mean, std = results[(dataset, workers)]
            lines.append([dataset, workers, repr(mean), repr(std), repr(relative_improvement(mean, base))])
    path = out / "ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "workers", "mean_f1", "std_f1", "rel_improvement_pct"])
        w.writerows(lines)
    for dataset, workers, mean, _, rel in lines:
        print(f"{dataset:20s} {workers:8s} F1 {float(mean):.4f}  vs {BASELINE}: {float(rel):+.2f}%")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration; flags override its values")
    common.add_argument("--seed", type=int, default=None, help="base seed (default: $MTSS_SEED or 0)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels for bit-identical reruns")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtss", description="Multi-task self-supervised audio pre-training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    p.add_argument("--kind", choices=KINDS, default="tempo")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=_per_class_arg, default=(10, 5, 5),
                   help="clips per class: N (split 50/25/25) or TRAIN,VALID,TEST")
    p.add_argument("--clip-s", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="extract worker targets and train-split statistics")
    p.add_argument("--corpus", help="manifest path")
    p.add_argument("--workers", type=_workers_arg, default="WLPMCT")
    p.add_argument("--out", help="feature store directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true", help="recompute existing feature files")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pretrain", parents=[common], help="multi-task pre-training")
    _pretrain_args(p)
    p.add_argument("--corpus", help="manifest path")
    p.add_argument("--features", help="feature store from `extract`")
    p.add_argument("--on-the-fly", action="store_true", help="compute targets in memory instead of the store")
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", parents=[common], help="downstream probe trials")
    p.add_argument("--corpus", help="labelled manifest")
    p.add_argument("--scenario", choices=[s.value for s in Scenario])
    p.add_argument("--ckpt", help="pre-trained checkpoint (frozen/fine_tuned)")
    p.add_argument("--trials", type=int)
    p.add_argument("--subsample", help="comma-separated training-set sizes, e.g. 100,200,400")
    p.add_argument("--encoder", choices=["PASE", "PASE_PLUS"], help="encoder for the supervised scenario")
    p.add_argument("--desk", action="store_true", help="narrow CPU-scale encoder")
    p.add_argument("--reports", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="worker-set grid relative to WLP")
    _pretrain_args(p)
    p.add_argument("--grid", default="WLP,WLPT", help="comma-separated worker sets (must include WLP)")
    p.add_argument("--corpus", action="append", required=True, help="labelled manifest (repeatable)")
    p.add_argument("--pretrain-corpus", help="pre-training manifest (default: first --corpus)")
    p.add_argument("--scenario", choices=[Scenario.FROZEN.value, Scenario.FINE_TUNED.value])
    p.add_argument("--trials", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def _pretrain_args(p):
    p.add_argument("--workers", type=_workers_arg)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--reweighted", action="store_true", help="equal-weighted warm-up, then reciprocal weights")
    p.add_argument("--raw-targets", action="store_true", help="regress unnormalized feature targets")
    p.add_argument("--encoder", choices=["PASE", "PASE_PLUS"])
    p.add_argument("--desk", action="store_true", help="narrow CPU-scale encoder")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is None:
            args.seed = _default_seed()
        _set_deterministic(args.deterministic)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mtss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, AudioError, PretrainError, DownstreamError, OSError, ValueError, RuntimeError) as exc:
        print(f"mtss {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
