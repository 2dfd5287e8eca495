"""Benchmark protocol: per-(dataset, alpha) fitting of every trigger method,
test-set evaluation against the hindsight oracle, and CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from .classifier import ALERT_STAR, DEFAULT_BINS, FEATURES, PrefixClassifierChain, StateEncoder, fit_bins
from .core import (DELAY_SCALE, MINORITY_FACTOR, CostModel, InputError, MetricReport, SeriesDataset, oracle_avg_cost,
                   oracle_trigger_indices)
from .ingest import DatasetSplit, SplitSpec, split_dataset, validate_posteriors
from .rl import TrainConfig, train_alert
from .stats import holm_correction, mean_ranks, pareto_front, wilcoxon_signed_rank, win_rate
from .triggers import BASELINES, TriggerPolicy, evaluate_policy

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
REPORT_SCHEMA_VERSION = 1

ALERT_VARIANTS = {
    "alert_star": ALERT_STAR,
    "alert_pt": ("max_posterior",),
    "alert_sr": ("max_posterior", "margin", "time"),
    "alert_eco": ("confidence_bin",),
    "alert_cal": ("posteriors", "max_posterior", "margin"),
    "alert_margin": ("margin",),
    "alert_class": ("predicted_class",),
    "alert_time": ("time",),
}
SINGLE_FEATURE_VARIANTS = ("alert_pt", "alert_margin", "alert_class", "alert_eco", "alert_time")


# -- data preparation ---------------------------------------------------------------

@dataclass
class PreparedDataset:
    """Posteriors on the trigger-train and test partitions plus the state encoder."""

    name: str
    dataset: SeriesDataset
    split: DatasetSplit
    posteriors: np.ndarray  # all series, (n, K, C)
    encoder: StateEncoder
    chain: PrefixClassifierChain | None = None
    delay_scale: float = DELAY_SCALE
    minority_factor: float = MINORITY_FACTOR

    @property
    def trigger_P(self):
        return self.posteriors[self.split.trigger_train]

    @property
    def trigger_y(self):
        return self.dataset.y[self.split.trigger_train]

    @property
    def test_P(self):
        return self.posteriors[self.split.test]

    @property
    def test_y(self):
        return self.dataset.y[self.split.test]

    @property
    def folds(self):
        """Validation folds as positions within the trigger-train partition."""
        tt = self.split.trigger_train
        return [(np.searchsorted(tt, a), np.searchsorted(tt, b)) for a, b in self.split.validation_folds]

    def costs(self, alpha: float) -> CostModel:
        return CostModel.for_dataset(self.dataset, alpha, delay_scale=self.delay_scale,
                                     minority_factor=self.minority_factor)


def prepare_dataset(dataset: SeriesDataset, split_spec: SplitSpec = SplitSpec(), n_bins: int = DEFAULT_BINS,
                    posteriors: np.ndarray | None = None, ridge: float = 1e-2,
                    delay_scale: float = DELAY_SCALE, minority_factor: float = MINORITY_FACTOR) -> PreparedDataset:
    """Split, fit the built-in chain on the classifier partition (unless external
    posteriors are given) and fit confidence bins on the trigger partition."""
    split = split_dataset(dataset, split_spec)
    chain = None
    if posteriors is None:
        chain = PrefixClassifierChain(ridge=ridge, seed=split_spec.seed).fit(dataset.subset(split.classifier_train))
        posteriors = chain.predict_proba(dataset.X)
    else:
        posteriors = validate_posteriors(posteriors)
        if posteriors.shape[:2] != (len(dataset), len(dataset.checkpoints)):
            raise InputError(f"posterior cache shape {posteriors.shape} does not match the dataset "
                             f"({len(dataset)} series, {len(dataset.checkpoints)} checkpoints)")
    bins = fit_bins(posteriors[split.trigger_train].max(axis=2), n_bins)
    encoder = StateEncoder(dataset.checkpoints, dataset.T, bins)
    return PreparedDataset(dataset.name, dataset, split, posteriors, encoder, chain, delay_scale, minority_factor)


# -- methods ------------------------------------------------------------------------

def parse_features(spec: str) -> tuple:
    feats = tuple(f for f in spec.split("+") if f)
    bad = [f for f in feats if f not in FEATURES]
    if bad or not feats:
        raise InputError(f"unknown state features in {spec!r}: {bad}")
    return feats


def method_features(method: str) -> tuple | None:
    """State features of an ALERT method name, or None for a baseline."""
    if method in ALERT_VARIANTS:
        return ALERT_VARIANTS[method]
    if method.startswith("alert:"):
        return parse_features(method[len("alert:"):])
    return None


def known_method(method: str) -> bool:
    return method in BASELINES or method_features(method) is not None


def fit_method(method: str, prep: PreparedDataset, costs: CostModel,
               train_config: TrainConfig = TrainConfig()) -> TriggerPolicy:
    feats = method_features(method)
    if feats is not None:
        return train_alert(prep.trigger_P, prep.trigger_y, prep.folds, prep.encoder, costs,
                           train_config, feats)
    if method in BASELINES:
        return BASELINES[method]().fit(prep.trigger_P, prep.trigger_y, prep.encoder, costs)
    raise InputError(f"unknown method {method!r}")


# -- sweep ----------------------------------------------------------------------------

@dataclass
class BenchmarkRun:
    dataset: str
    method: str
    alpha: float
    report: MetricReport | None
    oracle_avg_cost: float
    trigger_indices: np.ndarray = field(repr=False, default=None)
    oracle_indices: np.ndarray = field(repr=False, default=None)
    time_gap: float = math.nan  # mean (t_hat - t_star) / T
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None

    @property
    def avg_cost(self) -> float:
        return self.report.avg_cost if self.report else math.nan

    @property
    def relative_gap(self) -> float:
        if not self.report:
            return math.nan
        if self.oracle_avg_cost == 0:
            return 0.0 if self.report.avg_cost == 0 else math.inf
        return (self.report.avg_cost - self.oracle_avg_cost) / self.oracle_avg_cost


def cell_config(train_config: TrainConfig, seed: int, d: int, m: int, a: int) -> TrainConfig:
    cell_seed = int(np.random.SeedSequence([seed, d, m, a]).generate_state(1)[0])
    return TrainConfig(**{**train_config.as_dict(), "seed": cell_seed})


def evaluate_cell(policy: TriggerPolicy, prep: PreparedDataset, method: str, costs: CostModel) -> BenchmarkRun:
    P, y = prep.test_P, prep.test_y
    report, idx, _ = evaluate_policy(policy, P, y, prep.encoder, costs)
    cps = prep.encoder.checkpoints
    oracle = oracle_avg_cost(P, y, cps, costs)
    o_idx = oracle_trigger_indices(P, y, cps, costs)
    if report.avg_cost < oracle - 1e-9:
        logger.error("oracle dominance violated on %s/%s alpha=%s", prep.name, method, costs.alpha)
    gap = float(np.mean((cps[idx] - cps[o_idx]) / prep.dataset.T))
    return BenchmarkRun(prep.name, method, costs.alpha, report, oracle, idx, o_idx, gap)


def _run_cell(prep: PreparedDataset, method: str, alpha: float, config: TrainConfig) -> BenchmarkRun:
    costs = prep.costs(alpha)
    try:
        return evaluate_cell(fit_method(method, prep, costs, config), prep, method, costs)
    except Exception as exc:  # recorded per cell, the sweep continues
        logger.exception("cell %s/%s/%s failed", prep.name, method, alpha)
        return BenchmarkRun(prep.name, method, alpha, None, math.nan, error=f"{type(exc).__name__}: {exc}")


def alpha_sweep(prepared: list[PreparedDataset], methods, alphas=ALPHA_GRID,
                train_config: TrainConfig = TrainConfig(), seed: int = 0,
                progress: Callable[[str], None] | None = None, workers: int = 1) -> list[BenchmarkRun]:
    """Fit and evaluate every (dataset, method, alpha) cell; failures are recorded, not raised.

    Each cell draws its own seed from ``(seed, dataset, method, alpha)`` positions,
    so results do not depend on ``workers``.
    """
    cells = [(prep, method, alpha, cell_config(train_config, seed, d, m, a_i))
             for d, prep in enumerate(prepared)
             for a_i, alpha in enumerate(alphas)
             for m, method in enumerate(methods)]
    if workers <= 1:
        results = (_run_cell(*c) for c in cells)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_cell, *zip(*cells))
    runs = []
    try:
        for run in results:
            runs.append(run)
            if progress:
                progress(f"{run.dataset} alpha={run.alpha} {run.method}: {run.avg_cost:.4f}")
    finally:
        if pool is not None:
            pool.shutdown()
    return runs


# -- tables ---------------------------------------------------------------------------

def cost_table(runs, methods, alpha: float):
    """``(datasets, methods)`` AvgCost at one alpha, keeping datasets where all methods ran."""
    by = {(r.dataset, r.method): r for r in runs if r.alpha == alpha and r.ok}
    datasets = sorted({r.dataset for r in runs if r.alpha == alpha})
    datasets = [d for d in datasets if all((d, m) in by for m in methods)]
    table = np.array([[by[(d, m)].avg_cost for m in methods] for d in datasets]).reshape(len(datasets), len(methods))
    oracle = np.array([by[(d, methods[0])].oracle_avg_cost for d in datasets]) if methods else np.empty(0)
    return datasets, table, oracle


def alphas_of(runs) -> list:
    return sorted({r.alpha for r in runs})


def methods_of(runs) -> list:
    seen = []
    for r in runs:
        if r.method not in seen:
            seen.append(r.method)
    return seen


def pairwise_tables(runs, methods=None, level: float = 0.05):
    """Win rates, normalised cost differences, signed-rank p-values and Holm flags
    for every ordered pair of methods at every alpha."""
    methods = methods or methods_of(runs)
    win_rows, test_rows = [], []
    for alpha in alphas_of(runs):
        datasets, table, oracle = cost_table(runs, methods, alpha)
        if len(datasets) == 0:
            continue
        pairs, pvals = [], []
        for i, a in enumerate(methods):
            for j, b in enumerate(methods):
                if i == j:
                    continue
                with np.errstate(divide="ignore", invalid="ignore"):
                    norm_diff = np.where(oracle > 0, (table[:, j] - table[:, i]) / oracle, 0.0)
                win_rows.append({"alpha": alpha, "method_a": a, "method_b": b,
                                 "n_datasets": len(datasets),
                                 "win_rate": win_rate(table[:, i], table[:, j]),
                                 "mean_normalized_diff": float(np.mean(norm_diff))})
                if i < j:
                    pairs.append((a, b, table[:, i], table[:, j]))
                    pvals.append(wilcoxon_signed_rank(table[:, i], table[:, j]))
        reject = holm_correction(pvals, level) if pvals else []
        for (a, b, ca, cb), p, rej in zip(pairs, pvals, reject):
            med = float(np.median(ca - cb))
            direction = "a_better" if med < 0 else ("b_better" if med > 0 else "none")
            test_rows.append({"alpha": alpha, "method_a": a, "method_b": b, "p_value": p,
                              "holm_reject": bool(rej), "direction": direction})
    return win_rows, test_rows


def rank_rows(runs, methods=None, n_boot: int = 1000, seed: int = 0):
    methods = methods or methods_of(runs)
    rows = []
    if len(methods) < 2:
        return rows
    for a_i, alpha in enumerate(alphas_of(runs)):
        datasets, table, _ = cost_table(runs, methods, alpha)
        if len(datasets) == 0:
            continue
        mean, lo, hi = mean_ranks(table, n_boot=n_boot, seed=seed + a_i)
        rows.extend({"alpha": alpha, "method": m, "mean_rank": float(mean[k]), "lower": float(lo[k]),
                     "upper": float(hi[k]), "n_datasets": len(datasets)} for k, m in enumerate(methods))
    return rows


def pareto_rows(runs, methods=None):
    """Per method and alpha: dataset-mean delay and misclassification cost, with
    the method's non-dominated points across alphas flagged."""
    methods = methods or methods_of(runs)
    rows = []
    for m in methods:
        pts = []
        for alpha in alphas_of(runs):
            rs = [r for r in runs if r.method == m and r.alpha == alpha and r.ok]
            if rs:
                pts.append((alpha, float(np.mean([r.report.avg_delay_cost for r in rs])),
                            float(np.mean([r.report.avg_misclassification_cost for r in rs]))))
        front = pareto_front(np.array([(x, y) for _, x, y in pts])) if pts else np.empty((0, 2))
        on = {(x, y) for x, y in front}
        rows.extend({"method": m, "alpha": a, "mean_delay_cost": x, "mean_misclassification_cost": y,
                     "on_front": (x, y) in on} for a, x, y in pts)
    return rows


def scatter_rows(runs):
    """Per (method, alpha, dataset): earliness gap to the oracle and relative cost gap."""
    return [{"method": r.method, "alpha": r.alpha, "dataset": r.dataset,
             "time_gap": r.time_gap, "relative_gap": r.relative_gap} for r in runs if r.ok]


def scatter_summary_rows(runs):
    rows = []
    for m in methods_of(runs):
        for alpha in alphas_of(runs):
            rs = [r for r in runs if r.method == m and r.alpha == alpha and r.ok]
            if not rs:
                continue
            tg = np.array([r.time_gap for r in rs])
            cg = np.array([r.relative_gap for r in rs])
            with np.errstate(invalid="ignore"):  # infinite gaps (zero oracle) give nan spread
                rows.append({"method": m, "alpha": alpha, "n_datasets": len(rs),
                             "mean_time_gap": float(tg.mean()), "std_time_gap": float(tg.std()),
                             "mean_relative_gap": float(cg.mean()), "std_relative_gap": float(cg.std())})
    return rows


def run_rows(runs):
    rows = []
    for r in runs:
        rep = r.report.as_dict() if r.report else {}
        rows.append({
            "dataset": r.dataset, "method": r.method, "alpha": r.alpha,
            "avg_cost": rep.get("avg_cost", math.nan),
            "avg_delay_cost": rep.get("avg_delay_cost", math.nan),
            "avg_misclassification_cost": rep.get("avg_misclassification_cost", math.nan),
            "unweighted_avg_cost": rep.get("unweighted_avg_cost", math.nan),
            "mean_trigger_time": rep.get("mean_trigger_time", math.nan),
            "accuracy": rep.get("accuracy", math.nan),
            "oracle_avg_cost": r.oracle_avg_cost, "relative_gap": r.relative_gap,
            "time_gap": r.time_gap, "error": r.error,
        })
    return rows


# -- report files ------------------------------------------------------------------------

TABLE_COLUMNS = {
    "runs": ["dataset", "method", "alpha", "avg_cost", "avg_delay_cost", "avg_misclassification_cost",
             "unweighted_avg_cost", "mean_trigger_time", "accuracy", "oracle_avg_cost", "relative_gap",
             "time_gap", "error"],
    "win_rates": ["alpha", "method_a", "method_b", "n_datasets", "win_rate", "mean_normalized_diff"],
    "pvalues": ["alpha", "method_a", "method_b", "p_value", "holm_reject", "direction"],
    "ranks": ["alpha", "method", "mean_rank", "lower", "upper", "n_datasets"],
    "pareto": ["method", "alpha", "mean_delay_cost", "mean_misclassification_cost", "on_front"],
    "scatter": ["method", "alpha", "dataset", "time_gap", "relative_gap"],
    "scatter_summary": ["method", "alpha", "n_datasets", "mean_time_gap", "std_time_gap",
                        "mean_relative_gap", "std_relative_gap"],
}


def _cell(v) -> str:
    if isinstance(v, bool) or isinstance(v, np.bool_):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def read_table(path) -> list[dict]:
    """Read a report CSV back, converting numeric cells to exact floats."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v in ("true", "false"):
                    parsed[k] = v == "true"
                else:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out


def emit_report(runs, path, config: dict | None = None, seed: int = 0, n_boot: int = 1000) -> dict:
    """Write every table as CSV plus ``manifest.json``; returns the manifest."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    methods = methods_of(runs)
    win, tests = pairwise_tables(runs, methods)
    tables = {
        "runs": run_rows(runs),
        "win_rates": win,
        "pvalues": tests,
        "ranks": rank_rows(runs, methods, n_boot=n_boot, seed=seed),
        "pareto": pareto_rows(runs, methods),
        "scatter": scatter_rows(runs),
        "scatter_summary": scatter_summary_rows(runs),
    }
    files = {}
    for name, rows in tables.items():
        fname = f"{name}.csv"
        write_table(out / fname, TABLE_COLUMNS[name], rows)
        files[name] = fname
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": seed,
        "config": config or {},
        "methods": methods,
        "datasets": sorted({r.dataset for r in runs}),
        "alphas": alphas_of(runs),
        "tables": files,
        "versions": {"alert_ects": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest
