"""Command-line front end: ``tcts {train,evaluate,sweep,ablate-features,make-data}``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shutil
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics
from .config import ExperimentConfig, SweepSpec, load_config, load_sweep, serialize_config
from .models import ForecastModel, TransductionModel
from .tasks import (
    HORIZON, LATENCY, ParallelCorpus, SPLITS, ingest_csv, make_synthetic_series,
    make_synthetic_transduction, read_vocab, write_vocab,
)
from .trainer import ConfigError, SeriesData, TrainingAborted, TransductionData, evaluate, train

EXIT_CONFIG = 2
EXIT_FAILED = 1


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("TCTS_OUT") or cfg.out_dir)


def build_data(cfg: ExperimentConfig):
    d, t = cfg.data, cfg.train
    if t.family == LATENCY:
        if d.source == "files":
            root = Path(d.corpus_dir)
            vocab = len(read_vocab(root / "vocab.txt")) - 1
            corpora = [ParallelCorpus.read(root / f"{s}.txt", vocab, s) for s in SPLITS]
        else:
            sizes = {"train": d.train_size, "valid": d.valid_size, "test": d.test_size}
            corpora = [make_synthetic_transduction(d.seed, sizes[s], d.vocab, d.dependency, split=s,
                                                   persistence=d.persistence) for s in SPLITS]
        return TransductionData(*corpora)
    if d.source == "csv":
        panel = ingest_csv(d.csv, d.train_frac, d.valid_frac)
    else:
        panel = make_synthetic_series(d.seed, d.instruments, d.days, d.horizon_signal, noise=d.noise,
                                      coef=d.coef, window=t.window, max_horizon=max(t.tasks),
                                      train_frac=d.train_frac, valid_frac=d.valid_frac)
    return SeriesData(panel, t.window)


def _write_failure(out: Path, cfg: ExperimentConfig, reason: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.json"
    record = {"config": cfg.train.to_dict(), "status": "aborted", "failure": reason}
    if summary.exists():
        try:
            existing = json.loads(summary.read_text())
            if existing.get("status") == "aborted":
                return
        except ValueError:
            pass
    summary.write_text(json.dumps(record, indent=2))


def run_experiment(cfg: ExperimentConfig, out: Path, resume: bool = False) -> dict:
    """Train one configuration into ``out``; always leaves ``summary.json`` behind."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.ini").write_text(serialize_config(cfg))
    try:
        data = build_data(cfg)
        report = train(cfg.train, data, out_dir=out, resume=resume)
    except Exception as exc:  # noqa: BLE001 - every failure must be recorded
        _write_failure(out, cfg, f"{type(exc).__name__}: {exc}")
        raise
    if report.kstar is not None and cfg.train.strategy == "waitk_star":
        best = out / f"task_{report.kstar}"
        for name in ("checkpoint.tcts", "checkpoint.json"):
            shutil.copy(best / name, out / name)
    return report.summary()


# -- evaluate ---------------------------------------------------------------

def load_checkpoint(path):
    """Rebuild (experiment config, model) from a checkpoint written by ``train``."""
    path = Path(path)
    state_path = path.with_suffix(".json")
    ini = path.parent / "experiment.ini"
    if not ini.exists():
        ini = path.parent.parent / "experiment.ini"
    if not (path.exists() and state_path.exists() and ini.exists()):
        raise FileNotFoundError(f"{path}: checkpoint, its .json sidecar and experiment.ini are required")
    cfg = load_config(ini)
    state = json.loads(state_path.read_text())
    from .trainer import TrainConfig
    cfg = replace(cfg, train=TrainConfig.from_dict(state["config"]))
    mc = state["model"]
    if mc["kind"] == "transduction":
        model = TransductionModel(mc["src_vocab"], mc["tgt_vocab"], mc["emb_dim"], mc["hidden"])
    else:
        model = ForecastModel(mc["n_features"], mc["window"], mc["hidden"], mc["layers"], mc["n_tasks"])
    tensors = ad.load_tensors(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return cfg, model


def cmd_evaluate(args) -> int:
    cfg, model = load_checkpoint(args.checkpoint)
    data = build_data(cfg)
    rec = evaluate(model, data, args.split, cfg.train.task_set, decode=cfg.train.family == LATENCY,
                   beam=args.beam)
    run_id = Path(args.checkpoint).parent.name
    rows = [(run_id, args.split, k, v) for k, v in rec.items() if isinstance(v, (int, float))]
    out = Path(args.checkpoint).parent / f"metrics_{args.split}.csv"
    metrics.write_metric_rows(out, rows)
    for _, _, k, v in rows:
        print(f"{k}\t{v}")
    return 0


# -- sweep ------------------------------------------------------------------

def sweep_cells(cfg: ExperimentConfig, spec: SweepSpec) -> list[tuple[int, str, int, ExperimentConfig]]:
    cells = []
    axis = spec.k if cfg.train.family == LATENCY else spec.task_sets
    for value in axis:
        for strategy in spec.strategies:
            for seed in spec.seeds:
                if cfg.train.family == LATENCY:
                    tasks = cfg.train.tasks if value in cfg.train.tasks else tuple(sorted({*cfg.train.tasks, value}))
                    t = replace(cfg.train, strategy=strategy, seed=seed, main_task=value, tasks=tasks)
                else:
                    t = replace(cfg.train, strategy=strategy, seed=seed, main_task=1,
                                tasks=tuple(range(1, value + 1)))
                cells.append((value, strategy, seed, replace(cfg, train=t)))
    return cells


def _run_cell(args) -> dict:
    value, strategy, seed, cfg, out = args
    row = {"k": value, "strategy": strategy, "seed": seed, "status": "completed"}
    try:
        summary = run_experiment(cfg, Path(out))
        row["valid_loss"] = summary["final_valid_loss"]
        for key, v in summary["test"].items():
            if isinstance(v, (int, float)):
                row[f"test_{key}"] = v
    except Exception as exc:  # noqa: BLE001 - a failed cell is reported, not fatal
        row["status"] = "failed"
        row["failure"] = f"{type(exc).__name__}: {exc}"
    return row


def run_sweep(cfg: ExperimentConfig, spec: SweepSpec, out: Path, jobs: int = 1) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    work = [(v, s, seed, c, str(out / "cells" / f"{s}_k{v}_s{seed}"))
            for v, s, seed, c in sweep_cells(cfg, spec)]
    if jobs <= 1:
        rows = [_run_cell(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, work))
    keys = ["k", "strategy", "seed", "status"]
    extra = sorted({k for r in rows for k in r} - set(keys))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys + extra)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    quality = "test_bleu" if cfg.train.family == LATENCY and cfg.train.final_decode else (
        "test_rank_ic" if cfg.train.family == HORIZON else "test_loss")
    emit_curves(rows, out, quality, spec.seeds)
    return rows


def emit_curves(rows: list[dict], out_dir, quality: str, seeds=None) -> list[Path]:
    """One CSV per strategy with per-k latency and seed statistics of ``quality``.

    Rows whose cells are missing or failed are kept and flagged.
    """
    out_dir = Path(out_dir)
    paths = []
    strategies = sorted({r["strategy"] for r in rows})
    for strategy in strategies:
        mine = [r for r in rows if r["strategy"] == strategy]
        expected = set(seeds) if seeds is not None else {r["seed"] for r in mine}
        path = out_dir / f"curve_{strategy}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "AP", "AL", "metric", "seed_mean", "seed_std", "n_seeds", "flag"])
            for k in sorted({r["k"] for r in mine}):
                cell = [r for r in mine if r["k"] == k]
                ok = [r for r in cell if r.get("status") == "completed" and _finite(r.get(quality))]
                vals = np.array([r[quality] for r in ok], dtype=np.float64)
                ap = [r["test_ap"] for r in ok if _finite(r.get("test_ap"))]
                al = [r["test_al"] for r in ok if _finite(r.get("test_al"))]
                missing = expected - {r["seed"] for r in ok}
                flag = "missing:" + ";".join(str(s) for s in sorted(missing)) if missing else ""
                w.writerow([
                    k,
                    repr(float(np.mean(ap))) if ap else "",
                    repr(float(np.mean(al))) if al else "",
                    quality.removeprefix("test_"),
                    repr(float(vals.mean())) if vals.size else "",
                    repr(float(vals.std())) if vals.size else "",
                    len(ok), flag,
                ])
        paths.append(path)
    return paths


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v)


# -- make-data ----------------------------------------------------------------

def cmd_make_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.family == "transduction":
        sizes = {"train": args.train_size, "valid": args.valid_size, "test": args.test_size}
        for s in SPLITS:
            make_synthetic_transduction(args.seed, sizes[s], args.vocab, args.dependency, split=s).write(out / f"{s}.txt")
        write_vocab(out / "vocab.txt", args.vocab)
    else:
        panel = make_synthetic_series(args.seed, args.instruments, args.days, args.horizon_signal, noise=args.noise)
        panel.to_csv(out / "prices.csv")
        (out / "meta.json").write_text(json.dumps(panel.meta, indent=2))
    print(out)
    return 0


# -- argument parsing -------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcts", description="Task-scheduling experiments for temporally correlated tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")

    e = sub.add_parser("evaluate", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("valid", "test"), required=True)
    e.add_argument("--beam", type=int, default=1)

    s = sub.add_parser("sweep", help="run a grid of (k or task set, strategy, seed) cells")
    s.add_argument("--spec", required=True)
    s.add_argument("--jobs", type=int, default=1)

    a = sub.add_parser("ablate-features", help="rerun the scheduler with a feature group removed")
    a.add_argument("--config", required=True)
    a.add_argument("--mask", choices=("i", "ii", "iii", "iv"), required=True)

    m = sub.add_parser("make-data", help="write synthetic datasets")
    m.add_argument("--family", choices=("transduction", "series"), required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("--vocab", type=int, default=16)
    m.add_argument("--dependency", type=int, default=2)
    m.add_argument("--train-size", type=int, default=5000)
    m.add_argument("--valid-size", type=int, default=500)
    m.add_argument("--test-size", type=int, default=500)
    m.add_argument("--instruments", type=int, default=20)
    m.add_argument("--days", type=int, default=1500)
    m.add_argument("--horizon-signal", type=int, default=1)
    m.add_argument("--noise", type=float, default=0.02)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg = cfg.with_overrides(seed=args.seed)
            summary = run_experiment(cfg, output_dir(cfg), resume=args.resume)
            print(json.dumps({k: summary[k] for k in ("status", "final_valid_loss", "test")}, default=str))
        elif args.command == "evaluate":
            if args.beam < 1:
                raise ConfigError("beam", "must be >= 1")
            return cmd_evaluate(args)
        elif args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("jobs", "must be >= 1")
            cfg, spec = load_sweep(args.spec)
            rows = run_sweep(cfg, spec, output_dir(cfg), args.jobs)
            failed = sum(r["status"] != "completed" for r in rows)
            print(f"{len(rows)} cells, {failed} failed -> {output_dir(cfg)}")
            return EXIT_FAILED if failed else 0
        elif args.command == "ablate-features":
            cfg = load_config(args.config)
            cfg = cfg.with_overrides(strategy="ours", feature_mask=(args.mask,))
            base = output_dir(cfg) / f"ablate_{args.mask}"
            results = {}
            for seed in cfg.train.seeds:
                summary = run_experiment(cfg.with_overrides(seed=seed), base / f"seed_{seed}")
                results[seed] = summary["final_valid_loss"]
            from .scheduler import feature_names
            dims = len(feature_names(cfg.train.family, cfg.train.task_set, cfg.train.feature_mask))
            record = {"mask": args.mask, "feature_dim": dims, "final_valid_loss": results,
                      "mean_final_valid_loss": float(np.mean(list(results.values())))}
            (base / "ablation.json").write_text(json.dumps(record, indent=2))
            print(json.dumps(record))
        elif args.command == "make-data":
            return cmd_make_data(args)
    except ConfigError as exc:
        print(f"tcts: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as exc:
        print(f"tcts: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command in ("evaluate", "make-data") else EXIT_FAILED
    except TrainingAborted as exc:
        print(f"tcts: training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
