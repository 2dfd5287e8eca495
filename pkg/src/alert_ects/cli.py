"""Command-line front end.

Every command reads a flat ``key = value`` config file (``--config``) whose keys
can also be given as flags; flags win over the file, the file over defaults.
Errors are reported as one JSON line on stderr with a distinct exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .bench import (ALPHA_GRID, alpha_sweep, emit_report, evaluate_cell, fit_method, known_method,
                    prepare_dataset, write_table)
from .classifier import FitError
from .core import DELAY_SCALE, MINORITY_FACTOR, DataError, InputError
from .ingest import ParseError, SplitSpec, parse_tsv_dataset, read_posterior_cache, write_posterior_cache
from .rl import TrainConfig, TrainingError, decision_surface, write_surface_csv
from .synthetic import make_synthetic
from .triggers import load_policy, save_policy

logger = logging.getLogger(__name__)

OUTPUT_ENV = "ALERT_ECTS_OUTPUT"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3
EXIT_DATA = 4
EXIT_SHAPE = 5
EXIT_TRAINING = 6

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_UNEXPECTED: "unexpected internal error",
    EXIT_CONFIG: "invalid config key, value or command line",
    EXIT_MISSING_FILE: "input file or prerequisite artifact not found",
    EXIT_DATA: "malformed dataset, posterior cache or artifact",
    EXIT_SHAPE: "shape mismatch between inputs",
    EXIT_TRAINING: "model fitting or training failed",
}


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "synthetic"  # comma-separated paths, or "synthetic"
    delimiter: str = "tab"
    label_column: int = 0
    synthetic_series: int = 400
    synthetic_datasets: int = 1
    synthetic_signal_checkpoint: int = 10
    synthetic_noise: float = 1.0
    classifier: str = "builtin"  # builtin | external
    posteriors: str = ""  # cache path; defaults to <output_dir>/posteriors.txt downstream
    ridge: float = 1e-2
    n_bins: int = 10
    train_fraction: float = 0.7
    classifier_fraction: float = 0.5
    validation_fraction: float = 0.3
    stratify: bool = True
    method: str = "alert_star"
    methods: str = "alert_star,proba_threshold,stopping_rule,economy,calimera"
    alpha: float = 0.8
    alphas: str = ",".join(f"{a:g}" for a in ALPHA_GRID)
    delay_scale: float = DELAY_SCALE
    minority_factor: float = MINORITY_FACTOR
    seed: int = 0
    output_dir: str = ""
    workers: int = 1
    n_boot: int = 1000
    learning_rate: float = 1e-4
    tau: float = 3e-3
    gamma: float = 1.0
    batch_size: int = 256
    max_epochs: int = 200
    validate_every: int = 5
    n_splits: int = 3
    reward_mode: str = "shaped"
    hidden: int = 32
    reward_scale: float = 0.0  # 0: divide rewards by their largest magnitude

    @property
    def out(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV, "alert_ects_output"))

    @property
    def method_list(self) -> list[str]:
        return [m.strip() for m in self.methods.split(",") if m.strip()]

    @property
    def alpha_list(self) -> list[float]:
        return [float(a) for a in self.alphas.split(",") if a.strip()]

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, tau=self.tau, gamma=self.gamma,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           validate_every=self.validate_every, n_splits=self.n_splits,
                           reward_mode=self.reward_mode, hidden=self.hidden,
                           reward_scale=self.reward_scale or None, seed=self.seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.seed, self.train_fraction, self.classifier_fraction,
                         self.validation_fraction, self.n_splits, self.stratify)

    def validate(self) -> "RunConfig":
        if self.classifier not in ("builtin", "external"):
            raise ConfigError(f"classifier must be builtin or external, got {self.classifier!r}")
        if self.classifier == "external" and not self.posteriors:
            raise ConfigError("classifier=external needs posteriors=<cache path>")
        for m in self.method_list + [self.method]:
            if not known_method(m):
                raise ConfigError(f"unknown method {m!r}")
        try:
            alphas = self.alpha_list
            self.train_config()
            self.split_spec()
        except (ValueError, InputError) as exc:
            raise ConfigError(str(exc)) from exc
        if not all(0.0 <= a <= 1.0 for a in alphas + [self.alpha]):
            raise ConfigError("alpha values must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = CONFIG_FIELDS[key].type
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind}") from None
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"unknown config key {key!r} ({path}:{n})")
        values[key] = _convert(key, raw)
    return values


def build_config(file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    return RunConfig(**merged).validate()


# -- data loading -----------------------------------------------------------------------

def load_datasets(cfg: RunConfig):
    if cfg.dataset == "synthetic":
        return [make_synthetic(n_series=cfg.synthetic_series, signal_checkpoint=cfg.synthetic_signal_checkpoint,
                               noise=cfg.synthetic_noise, seed=cfg.seed + i,
                               name=f"synthetic{i}") for i in range(cfg.synthetic_datasets)]
    delim = {"tab": "\t", "comma": ",", "space": " "}.get(cfg.delimiter, cfg.delimiter)
    out = []
    for p in (s.strip() for s in cfg.dataset.split(",")):
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
        out.append(parse_tsv_dataset(p, delimiter=delim, label_column=cfg.label_column))
    return out


def _single_dataset(cfg: RunConfig):
    data = load_datasets(cfg)
    if len(data) != 1:
        raise ConfigError("this command takes exactly one dataset")
    return data[0]


def _posterior_path(cfg: RunConfig) -> Path:
    return Path(cfg.posteriors) if cfg.posteriors else cfg.out / "posteriors.txt"


def _prepare(cfg: RunConfig, dataset, posteriors=None):
    try:
        return prepare_dataset(dataset, cfg.split_spec(), cfg.n_bins, posteriors, cfg.ridge,
                               cfg.delay_scale, cfg.minority_factor)
    except InputError as exc:
        if "does not match" in str(exc):
            raise ShapeError(str(exc)) from exc
        raise


def _prepared_from_cache(cfg: RunConfig):
    dataset = _single_dataset(cfg)
    path = _posterior_path(cfg)
    if not path.is_file():
        raise FileNotFoundError(f"posterior cache not found: {path} (run fit-classifier first)")
    return _prepare(cfg, dataset, read_posterior_cache(path))


def _policy_path(cfg: RunConfig, method: str) -> Path:
    return cfg.out / f"policy_{method}.txt"


def _load_policy(cfg: RunConfig, method: str):
    path = _policy_path(cfg, method)
    if not path.is_file():
        raise FileNotFoundError(f"policy not found: {path} (run train-trigger first)")
    return load_policy(path)


# -- commands -------------------------------------------------------------------------------

def cmd_fit_classifier(cfg: RunConfig) -> dict:
    if cfg.classifier == "external":
        raise ConfigError("fit-classifier needs classifier=builtin")
    prep = _prepare(cfg, _single_dataset(cfg))
    cfg.out.mkdir(parents=True, exist_ok=True)
    chain_path = cfg.out / "classifier.txt"
    prep.chain.save(chain_path, prep.encoder.bins)
    cache = cfg.out / "posteriors.txt"
    write_posterior_cache(prep.posteriors, cache)
    return {"classifier": str(chain_path), "posteriors": str(cache)}


def cmd_train_trigger(cfg: RunConfig, method: str) -> dict:
    prep = _prepared_from_cache(cfg)
    policy = fit_method(method, prep, prep.costs(cfg.alpha), cfg.train_config())
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = _policy_path(cfg, method)
    save_policy(policy, path)
    return {"policy": str(path), "method": method, "alpha": cfg.alpha}


def cmd_evaluate(cfg: RunConfig, method: str) -> dict:
    prep = _prepared_from_cache(cfg)
    policy = _load_policy(cfg, method)
    run = evaluate_cell(policy, prep, method, prep.costs(cfg.alpha))
    row = {"dataset": prep.name, "method": method, **run.report.as_dict(),
           "unweighted_avg_cost": run.report.unweighted_avg_cost,
           "oracle_avg_cost": run.oracle_avg_cost}
    path = cfg.out / f"evaluate_{method}.csv"
    write_table(path, list(row), [row])
    return {**row, "csv": str(path)}


def cmd_benchmark(cfg: RunConfig) -> dict:
    data = load_datasets(cfg)
    if cfg.classifier == "external":
        if len(data) != 1:
            raise ConfigError("external posteriors support a single dataset")
        prepared = [_prepare(cfg, data[0], read_posterior_cache(_posterior_path(cfg)))]
    else:
        prepared = [_prepare(cfg, d) for d in data]
    runs = alpha_sweep(prepared, cfg.method_list, cfg.alpha_list, cfg.train_config(), cfg.seed,
                       progress=logger.info, workers=cfg.workers)
    out = cfg.out / "report"
    manifest = emit_report(runs, out, config=cfg.__dict__, seed=cfg.seed, n_boot=cfg.n_boot)
    failed = sum(not r.ok for r in runs)
    return {"report": str(out), "cells": len(runs), "failed_cells": failed, "tables": manifest["tables"]}


def cmd_surface(cfg: RunConfig, method: str) -> dict:
    prep = _prepared_from_cache(cfg)
    policy = _load_policy(cfg, method)
    probs, times, dec = decision_surface(policy, prep.encoder, n_classes=prep.dataset.n_classes)
    path = cfg.out / f"surface_{method}.csv"
    write_surface_csv(path, probs, times, dec)
    return {"surface": str(path), "trigger_share": float(dec.mean())}


# -- argument parsing -------------------------------------------------------------------------

COMMANDS = {
    "fit-classifier": (cmd_fit_classifier, False),
    "train-trigger": (cmd_train_trigger, True),
    "evaluate": (cmd_evaluate, True),
    "benchmark": (cmd_benchmark, False),
    "surface": (cmd_surface, True),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alert-ects", description="Early classification of time series with learned triggers.",
                     epilog="exit codes: " + "; ".join(f"{k} {v}" for k, v in EXIT_CODES.items()))
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in CONFIG_FIELDS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE")
    return parser


def _error_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_FILE
    if isinstance(exc, ShapeError):
        return EXIT_SHAPE
    if isinstance(exc, (ParseError, DataError, InputError)):
        return EXIT_DATA
    if isinstance(exc, (FitError, TrainingError)):
        return EXIT_TRAINING
    return EXIT_UNEXPECTED


def _report_error(exc: BaseException, code: int) -> None:
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: _convert(k, getattr(args, k)) for k in CONFIG_FIELDS if getattr(args, k) is not None}
        cfg = build_config(file_values, flags)
        fn, needs_method = COMMANDS[args.command]
        result = fn(cfg, cfg.method) if needs_method else fn(cfg)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        code = _error_code(exc)
        if code == EXIT_UNEXPECTED:
            logger.debug("unexpected error", exc_info=True)
        _report_error(exc, code)
        return code
    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
