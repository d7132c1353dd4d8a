"""Command-line entry point: ``upliftlab {gen,run,ablate,eval,report}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ALL_STRATEGIES, DATASETS, ConfigError, ExperimentConfig, load_config
from .datagen import DataFormatError, load_csv
from .experiment import (
    ablation_config,
    curve_rows,
    load_stream,
    render_reports,
    results_from_report,
    run_experiment,
    write_rows,
    write_stream,
)
from .metrics import evaluate
from .model import CheckpointError, DrcfrModel

def _strategies(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in names if s not in ALL_STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategies {bad}; choose from {list(ALL_STRATEGIES)}")
    return names


def _build_config(args, **force) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    kw = dict(force)
    if getattr(args, "dataset", None):
        kw["dataset"] = args.dataset
    if getattr(args, "csv_dir", None):
        kw["csv_dir"] = args.csv_dir
    if getattr(args, "seed", None) is not None:
        kw["seeds"] = (args.seed,)
    if getattr(args, "strategies", None):
        kw["strategies"] = args.strategies
    if getattr(args, "workers", None):
        kw["workers"] = args.workers
    # rebuild so that validation and dimension defaults run again
    fields = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    return ExperimentConfig(**{**fields, **kw})


def cmd_gen(args) -> int:
    cfg = _build_config(args)
    if cfg.dataset == "csv":
        raise ConfigError("gen writes synthetic streams; choose synth2d or synth10d")
    seed = cfg.seeds[0]
    paths = write_stream(load_stream(cfg, seed), args.out)
    print(f"wrote {len(paths)} files for periods 0..{cfg.periods} to {args.out}")
    return 0


def _run(cfg: ExperimentConfig, out) -> int:
    res = run_experiment(cfg, out)
    print(res.reports["report.md"], end="")
    failed = res.manifest["errors"]
    if failed:
        print(f"{sum(len(v) for v in failed.values())} strategy run(s) failed; see run_manifest.json",
              file=sys.stderr)
        return 1
    return 0


def cmd_run(args) -> int:
    return _run(_build_config(args), args.out)


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    if not args.strategies:
        cfg = ablation_config(cfg)
    return _run(cfg, args.out)


def _read_preds(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f"{path}: empty file (line 1)")
    cols = [i for i, h in enumerate(rows[0]) if h.strip().startswith("yhat")]
    if not cols:
        raise DataFormatError(f"{path}: line 1: expected yhat0..yhatT columns")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            out.append([float(row[i]) for i in cols])
        except (ValueError, IndexError):
            raise DataFormatError(f"{path}: line {lineno}: bad prediction row") from None
    return np.asarray(out)


def cmd_eval(args) -> int:
    data = load_csv(args.data)
    if args.model:
        preds = DrcfrModel.load(args.model).predict_all(data.x)
    else:
        preds = _read_preds(args.preds)
    if preds.shape[0] != len(data):
        raise DataFormatError(f"{len(preds)} predictions for {len(data)} rows")
    metrics = {k: float(v) for k, v in evaluate(preds, data).items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    write_rows(out / "metrics.csv", ("metric", "value"), [(k, repr(v)) for k, v in metrics.items()])
    qini, ras = curve_rows(preds, data)
    write_rows(out / "qini_curve.csv", ("arm", "fraction", "qini"), qini)
    write_rows(out / "ras_curve.csv", ("delta_cost", "delta_reward"), ras)
    for k, v in metrics.items():
        print(f"{k}\t{v:.6f}")
    return 0


def cmd_report(args) -> int:
    runs = args.runs or [args.out]
    results, cfg = [], None
    for d in runs:
        d = Path(d)
        report = json.loads((d / "report.json").read_text())
        results += results_from_report(report)
        if cfg is None:
            cfg = load_config(d / "config.ini")
    seeds = sorted({r.seed for r in results})
    if len(seeds) != len(results):
        raise ConfigError("the same seed appears in more than one run directory")
    results.sort(key=lambda r: r.seed)
    cfg = dataclasses.replace(cfg, seeds=tuple(seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in render_reports(results, cfg).items():
        (out / name).write_text(text)
    print((out / "report.md").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upliftlab", description="Continual multi-treatment uplift experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, strategies=True):
        sp.add_argument("--config", help="key-value experiment config file")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--dataset", choices=DATASETS)
            sp.add_argument("--csv-dir", help="directory of period_<k>_{train,test}.csv files")
        if strategies:
            sp.add_argument("--strategies", type=_strategies,
                            help="comma-separated subset of: " + ", ".join(ALL_STRATEGIES))
            sp.add_argument("--workers", type=int, help="parallel seed workers")

    sp = sub.add_parser("gen", help="write a synthetic stream as CSV")
    common(sp, strategies=False)
    sp.set_defaults(func=cmd_gen)
    sp = sub.add_parser("run", help="run strategies and write reports")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("ablate", help="run ICE-PKD and its ablations against the baseline")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("eval", help="metrics and curves for stored predictions or a checkpoint")
    sp.add_argument("--data", required=True, help="RCT test CSV")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--preds", help="CSV with yhat0..yhatT columns")
    g.add_argument("--model", help="model checkpoint JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("report", help="rebuild report tables from one or more run directories")
    sp.add_argument("runs", nargs="*", help="run directories (default: --out)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"upliftlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
