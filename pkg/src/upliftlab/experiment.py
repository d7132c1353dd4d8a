"""Strategy runs, stability reports and run artifacts."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ABLATIONS, BASELINE, ExperimentConfig, dump_config
from .datagen import ObservationBatch, PeriodDataset, gen_period, load_csv, write_csv
from .incremental import (
    IcepkdConfig,
    StageState,
    incremental_stage,
    init_replay,
    select_initial_model,
    stage_manifest,
)
from .metrics import (
    LARGER_IS_BETTER,
    CostModel,
    evaluate,
    qini_values,
    ras_curve,
    stability,
)
from .model import DrcfrModel, derive_seed, train

log = logging.getLogger(__name__)

METRICS = ("ate_error", "pehe", "qini", "ras_aucc")
METRIC_LABELS = {"ate_error": "eps_ATE", "pehe": "eps_PEHE", "qini": "QINI", "ras_aucc": "RAS-AUCC"}
DATASET_LABELS = {"synth2d": "Synthetic 2-d", "synth10d": "Synthetic 10-d", "csv": "CSV stream"}

_TAG_A, _TAG_B = 201, 202

_ABLATION_FLAGS = {
    "ICE-PKD": {},
    "ICE-PKD w/o PT": {"use_proxy": False},
    "ICE-PKD w/o RM": {"use_replay": False},
    "ICE-PKD w/o KD": {"use_kd": False},
}


def slug(name: str) -> str:
    return name.lower().replace(" w/o ", "-wo-").replace(" ", "-")


# -- data ------------------------------------------------------------------------

def csv_paths(directory, k: int) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"period_{k}_train.csv", d / f"period_{k}_test.csv"


def load_stream(cfg: ExperimentConfig, seed: int) -> list[PeriodDataset]:
    """Periods 0..K. Synthetic streams depend on the seed; CSV streams do not."""
    if cfg.dataset == "csv":
        out = []
        for k in range(cfg.periods + 1):
            tr, te = csv_paths(cfg.csv_dir, k)
            out.append(PeriodDataset(load_csv(tr, cfg.model.n_arms, k), load_csv(te, cfg.model.n_arms, k)))
        return out
    dim = 10 if cfg.dataset == "synth10d" else 2
    return [gen_period(k, cfg.n_train, cfg.n_test, seed, cfg.noise, dim) for k in range(cfg.periods + 1)]


def increment(period: PeriodDataset, frac: float) -> ObservationBatch:
    """Leading ``frac`` of a period's training split."""
    n = max(1, int(round(frac * len(period.train))))
    return period.train.subset(np.arange(n))


def write_stream(stream: list[PeriodDataset], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, p in enumerate(stream):
        tr, te = csv_paths(d, k)
        write_csv(p.train, tr)
        write_csv(p.test, te)
        paths += [tr, te]
    return paths


# -- per-seed run ----------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, list[dict]] = field(default_factory=dict)  # strategy -> per-period dicts
    errors: dict[str, str] = field(default_factory=dict)
    checkpoints: dict[str, list[str]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def curve_rows(preds, batch: ObservationBatch) -> tuple[list, list]:
    tau = preds[:, 1:] - preds[:, :1]
    qini = []
    for a in range(1, preds.shape[1]):
        c = qini_values(tau[:, a - 1], batch.t, batch.y, a)
        qini += [(a, repr(float(m)), repr(float(v))) for m, v in zip(c.m, c.v)]
    x, y = ras_curve(preds, batch).points()
    ras = [(repr(float(a)), repr(float(b))) for a, b in zip(x, y)]
    return qini, ras


def write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class _Evaluator:
    def __init__(self, stream, seed_dir: Path | None):
        self.stream = stream
        self.dir = seed_dir

    def __call__(self, strategy: str, k: int, model: DrcfrModel) -> dict:
        test = self.stream[k].test
        preds = model.predict_all(test.x)
        res = {m: float(v) for m, v in evaluate(preds, test, CostModel.linear(preds.shape[1])).items()}
        if self.dir is not None:
            curves = self.dir / "curves"
            curves.mkdir(parents=True, exist_ok=True)
            qini, ras = curve_rows(preds, test)
            write_rows(curves / f"{slug(strategy)}_k{k}_qini.csv", ("arm", "fraction", "qini"), qini)
            write_rows(curves / f"{slug(strategy)}_k{k}_ras.csv", ("delta_cost", "delta_reward"), ras)
        return res


def run_seed(cfg: ExperimentConfig, seed: int, out_dir=None) -> SeedResult:
    """Run every configured strategy on one seed's stream."""
    res = SeedResult(seed)
    seed_dir = Path(out_dir) / f"seed_{seed}" if out_dir is not None else None
    ckpt_dir = seed_dir / "checkpoints" if seed_dir is not None and cfg.save_checkpoints else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    stream = load_stream(cfg, seed)
    ev = _Evaluator(stream, seed_dir)
    ks = range(1, cfg.periods + 1)
    mc = cfg.model
    icfg = replace(cfg.icepkd, seed=seed)

    def save(model: DrcfrModel, name: str) -> str | None:
        if ckpt_dir is None:
            return None
        path = ckpt_dir / name
        model.save(path)
        return str(path.relative_to(out_dir))

    needs_init = any(s == "C" or s.startswith("ICE-PKD") for s in cfg.strategies)
    theta0 = None
    if needs_init:
        t0 = time.perf_counter()
        theta0 = select_initial_model(stream[0].train, mc, icfg.restarts, seed, icfg.val_frac).model
        res.timings["initial_selection"] = time.perf_counter() - t0
        init_path = save(theta0, "initial.model.json")

    for strategy in cfg.strategies:
        t0 = time.perf_counter()
        try:
            per, paths = [], []
            if strategy == "A":
                for k in ks:
                    data = stream[k - 1].train
                    if cfg.a_window == "previous+current":
                        data = ObservationBatch.concat([data, increment(stream[k], cfg.incr_frac)])
                    s = derive_seed(seed, k, _TAG_A)
                    m = train(DrcfrModel(mc, seed=s), data, seed=s).model
                    paths.append(save(m, f"a_k{k}.model.json"))
                    per.append(ev(strategy, k, m))
            elif strategy == "B":
                for k in ks:
                    s = derive_seed(seed, k, _TAG_B)
                    m = train(DrcfrModel(mc, seed=s), increment(stream[k], cfg.incr_frac), seed=s).model
                    paths.append(save(m, f"b_k{k}.model.json"))
                    per.append(ev(strategy, k, m))
            elif strategy == "C":
                for k in ks:
                    paths.append(init_path)
                    per.append(ev(strategy, k, theta0))
            else:
                scfg = icepkd_variant(icfg, strategy)
                state = StageState(theta0, init_replay(stream[0].train, seed), 0)
                for k in ks:
                    stage = incremental_stage(state, increment(stream[k], cfg.incr_frac), scfg)
                    state = stage.state
                    name = f"{slug(strategy)}_k{k}"
                    path = save(state.model, f"{name}.model.json")
                    if ckpt_dir is not None:
                        state.buffer.save(ckpt_dir / f"{name}.buffer.json")
                        manifest = stage_manifest(stage, f"{name}.model.json", f"{name}.buffer.json")
                        (ckpt_dir / f"{name}.manifest.json").write_text(
                            json.dumps(manifest, indent=2, sort_keys=True))
                    paths.append(path)
                    per.append(ev(strategy, k, state.model))
            res.metrics[strategy] = per
            res.checkpoints[strategy] = paths
        except Exception as exc:  # recorded; other strategies continue
            log.exception("strategy %s failed on seed %d", strategy, seed)
            res.errors[strategy] = f"{type(exc).__name__}: {exc}"
        res.timings[strategy] = time.perf_counter() - t0
    return res


# -- aggregation and reports -------------------------------------------------------------

def period_means(results: list[SeedResult], strategy: str, metric: str) -> list[float] | None:
    """Per-period mean over the seeds that completed ``strategy``."""
    rows = [r.metrics[strategy] for r in results if strategy in r.metrics]
    if not rows or any(metric not in d for row in rows for d in row):
        return None
    return [float(np.mean([row[i][metric] for row in rows])) for i in range(len(rows[0]))]


def stability_table(results: list[SeedResult], strategies, baseline: str = BASELINE) -> dict:
    """strategy -> metric -> {prio10, prdu5, ad} against the baseline's period means."""
    table = {}
    for s in strategies:
        table[s] = {}
        for m in METRICS:
            series, base = period_means(results, s, m), period_means(results, baseline, m)
            if series is None or base is None:
                continue
            try:
                rep = stability(series, base, LARGER_IS_BETTER[m])
            except ZeroDivisionError:
                continue
            table[s][m] = {"prio10": rep.prio10, "prdu5": rep.prdu5, "ad": rep.ad}
    return table


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def render_reports(results: list[SeedResult], cfg: ExperimentConfig) -> dict[str, str]:
    """File name -> contents for every report; byte-stable for fixed inputs."""
    strategies = [s for s in cfg.strategies]
    have_base = BASELINE in strategies and all(BASELINE in r.metrics for r in results)
    stab = stability_table(results, strategies) if have_base else {}
    metrics = [m for m in METRICS if any(period_means(results, s, m) is not None for s in strategies)]
    ks = list(range(1, cfg.periods + 1))

    # per-period means: rows k, columns metric x strategy
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["period"] + [f"{m}:{s}" for m in metrics for s in strategies])
    means = {(s, m): period_means(results, s, m) for s in strategies for m in metrics}
    for i, k in enumerate(ks):
        w.writerow([k] + [_num(means[s, m][i]) if means[s, m] else "" for m in metrics for s in strategies])
    by_period = buf.getvalue()

    # long form, every seed
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "strategy", "period", "metric", "value"])
    for r in results:
        for s in strategies:
            for i, d in enumerate(r.metrics.get(s, [])):
                for m in metrics:
                    if m in d:
                        w.writerow([r.seed, s, ks[i], m, _num(d[m])])
    per_seed = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "strategy"] + [f"{m}:{c}" for m in metrics for c in ("prio10", "prdu5", "ad")])
    for s in strategies:
        row = [cfg.dataset, s]
        for m in metrics:
            cell = stab.get(s, {}).get(m)
            row += [_num(cell[c]) if cell else "" for c in ("prio10", "prdu5", "ad")]
        w.writerow(row)
    stab_csv = buf.getvalue()

    label = DATASET_LABELS[cfg.dataset]
    head = "| Dataset | Strategy | " + " | ".join(
        f"{METRIC_LABELS[m]} PRIO-10 | {METRIC_LABELS[m]} PRDU-5 | {METRIC_LABELS[m]} AD" for m in metrics) + " |"
    lines = [f"Stability against DR-CFR {BASELINE} (seeds: {', '.join(map(str, cfg.seeds))}; "
             f"periods 1..{cfg.periods})", "", head, "|" + "---|" * (2 + 3 * len(metrics))]
    for s in strategies:
        cells = []
        for m in metrics:
            cell = stab.get(s, {}).get(m)
            cells += ([f"{cell['prio10']:.2f}%", f"{cell['prdu5']:.2f}%", f"{cell['ad']:+.4f}"]
                      if cell else ["n/a"] * 3)
        name = s if s.startswith("ICE") else f"DR-CFR {s}"
        lines.append(f"| {label} | {name} | " + " | ".join(cells) + " |")
    lines += ["", "Per-period means over seeds", "",
              "| Strategy | " + " | ".join(f"{METRIC_LABELS[m]}" for m in metrics) + " |",
              "|" + "---|" * (1 + len(metrics))]
    for s in strategies:
        vals = [means[s, m] for m in metrics]
        lines.append(f"| {s} | " + " | ".join(f"{np.mean(v):.5f}" if v else "n/a" for v in vals) + " |")
    errors = {f"{r.seed}:{s}": e for r in results for s, e in r.errors.items()}
    if errors:
        lines += ["", "Failures", ""] + [f"- seed {k.split(':')[0]}, {k.split(':', 1)[1]}: {e}"
                                         for k, e in sorted(errors.items())]
    md = "\n".join(lines) + "\n"

    report = {
        "dataset": cfg.dataset,
        "config_hash": cfg.hash(),
        "seeds": list(cfg.seeds),
        "periods": ks,
        "baseline": BASELINE if have_base else None,
        "stability": stab,
        "period_means": {s: {m: means[s, m] for m in metrics if means[s, m]} for s in strategies},
        "per_seed": {str(r.seed): r.metrics for r in results},
        "errors": errors,
    }
    return {
        "metrics_by_period.csv": by_period,
        "metrics_per_seed.csv": per_seed,
        "stability.csv": stab_csv,
        "report.md": md,
        "report.json": json.dumps(report, indent=2, sort_keys=True) + "\n",
    }


def results_from_report(report: dict) -> list[SeedResult]:
    return [SeedResult(int(s), metrics=m) for s, m in sorted(report["per_seed"].items(), key=lambda kv: int(kv[0]))]


@dataclass
class RunOutput:
    results: list[SeedResult]
    reports: dict[str, str]
    manifest: dict


def _run_seed_job(args):
    cfg, seed, out_dir = args
    return run_seed(cfg, seed, out_dir)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunOutput:
    """All strategies x seeds, then reports and a run manifest under ``out_dir``."""
    t0 = time.perf_counter()
    jobs = [(cfg, s, out_dir) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [_run_seed_job(j) for j in jobs]
    reports = render_reports(results, cfg)
    manifest = {
        "format": "upliftlab.run",
        "config_hash": cfg.hash(),
        "seeds": list(cfg.seeds),
        "strategies": list(cfg.strategies),
        "checkpoints": {str(r.seed): r.checkpoints for r in results},
        "reports": sorted(reports),
        "errors": {str(r.seed): r.errors for r in results if r.errors},
        "timings": {str(r.seed): r.timings for r in results},
        "wall_clock": time.perf_counter() - t0,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
        for name, text in reports.items():
            (out / name).write_text(text)
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunOutput(results, reports, manifest)


def ablation_config(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, strategies=(BASELINE, "ICE-PKD") + ABLATIONS)


def icepkd_variant(cfg: IcepkdConfig, strategy: str) -> IcepkdConfig:
    return replace(cfg, **_ABLATION_FLAGS[strategy])
