"""Dataset files, deterministic stratified splits and the posterior cache format."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataError, InputError, SeriesDataset

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


class ParseError(ValueError):
    """Malformed dataset file; the message names the offending row."""


def _label_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _canonical_label(label: str):
    try:
        f = float(label)
    except ValueError:
        return label
    return int(f) if f.is_integer() else f


def parse_tsv_dataset(path, delimiter: str = "\t", label_column: int = 0,
                      name: str | None = None, checkpoints=None) -> SeriesDataset:
    """Read a UCR-style file: one series per row, the label in ``label_column``.

    Raises :class:`ParseError` with the 1-based row number on ragged rows or
    non-numeric cells.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc

    labels, rows, width = [], [], None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.strip().split(delimiter) if delimiter.strip() else line.split()
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(f"row {lineno}: expected {width} cells, found {len(cells)}")
        if not 0 <= label_column < len(cells):
            raise ParseError(f"row {lineno}: no label column {label_column}")
        label = cells[label_column].strip()
        try:
            values = [float(c) for i, c in enumerate(cells) if i != label_column]
        except ValueError as exc:
            raise ParseError(f"row {lineno}: non-numeric cell ({exc})") from exc
        labels.append(label)
        rows.append(values)
    if not rows:
        raise ParseError(f"{path}: no data rows")

    classes = sorted(set(labels), key=_label_key)
    index = {c: i for i, c in enumerate(classes)}
    X = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: missing values are not supported")
    y = np.array([index[c] for c in labels], dtype=np.int64)
    ds = SeriesDataset(X, y, tuple(_canonical_label(c) for c in classes), checkpoints, name or path.stem)
    if looks_z_normalized(ds):
        logger.warning("%s looks z-normalized; per-series normalization uses future "
                       "values and can leak information into early decisions", ds.name)
    return ds


def write_tsv_dataset(dataset: SeriesDataset, path, delimiter: str = "\t") -> None:
    if dataset.X.shape[1] != 1:
        raise InputError("the TSV format holds single-channel series only")
    with open(path, "w") as fh:
        for x, y in zip(dataset.X[:, 0, :], dataset.y):
            cells = [str(dataset.classes[y])] + [repr(float(v)) for v in x]
            fh.write(delimiter.join(cells) + "\n")


def looks_z_normalized(dataset: SeriesDataset, tol: float = 1e-3) -> bool:
    X = dataset.X
    mu = X.mean(axis=2)
    sd = X.std(axis=2)
    return bool(np.all(np.abs(mu) < tol) and np.all(np.abs(sd - 1.0) < 1e-2))


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    train_fraction: float = 0.7
    classifier_fraction_of_train: float = 0.5
    validation_fraction_of_trigger_train: float = 0.3
    n_folds: int = 3
    stratify: bool = True

    def __post_init__(self):
        for name in ("train_fraction", "classifier_fraction_of_train",
                     "validation_fraction_of_trigger_train"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InputError(f"{name} must lie in (0, 1), got {v}")
        if self.n_folds < 1:
            raise InputError("at least one validation fold is required")


@dataclass(frozen=True)
class DatasetSplit:
    """Index arrays into the source dataset."""

    classifier_train: np.ndarray
    trigger_train: np.ndarray
    validation_folds: list  # of (train_idx, valid_idx), subsets of trigger_train
    test: np.ndarray


def _allocate(counts: np.ndarray, n_held: int) -> np.ndarray:
    """Spread ``n_held`` across classes proportionally: floor, then largest remainder."""
    total = counts.sum()
    exact = counts * n_held / total
    held = np.floor(exact).astype(np.int64)
    short = n_held - held.sum()
    if short > 0:
        rem = exact - held
        order = sorted(range(len(counts)), key=lambda c: (-rem[c], c))
        for c in order[:short]:
            held[c] += 1
    return np.minimum(held, counts)


def _two_way(idx: np.ndarray, labels: np.ndarray, held_fraction: float,
             rng: np.random.Generator, stratify: bool):
    """Split ``idx`` into (kept, held) with ``floor(n * held_fraction)`` held out."""
    n_held = int(math.floor(len(idx) * held_fraction))
    perm = idx[rng.permutation(len(idx))]
    if not stratify:
        return np.sort(perm[n_held:]), np.sort(perm[:n_held])
    lab = labels[perm]
    classes = np.unique(lab)
    counts = np.array([np.sum(lab == c) for c in classes])
    held_counts = _allocate(counts, n_held)
    kept, held = [], []
    for c, h in zip(classes, held_counts):
        members = perm[lab == c]
        held.append(members[:h])
        kept.append(members[h:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def split_dataset(dataset: SeriesDataset, spec: SplitSpec = SplitSpec()) -> DatasetSplit:
    """Train/test, classifier/trigger and validation-fold partitions.

    Held-out sizes use ``floor``; leftovers stay on the training side. When
    stratifying, per-class shares are floored and the remaining slots go to the
    classes with the largest fractional remainder.
    """
    n = len(dataset)
    if n < 10:
        raise InputError(f"need at least 10 series to split, got {n}")
    labels = dataset.y
    stratify = spec.stratify
    if stratify and np.min(np.bincount(labels, minlength=dataset.n_classes)[np.unique(labels)]) < 2:
        logger.warning("a class has fewer than 2 series; falling back to an unstratified split")
        stratify = False

    seeds = np.random.SeedSequence(spec.seed).spawn(3 + spec.n_folds)
    rngs = [np.random.default_rng(s) for s in seeds]
    train, test = _two_way(np.arange(n), labels, 1.0 - spec.train_fraction, rngs[0], stratify)
    trigger, clf = _two_way(train, labels, spec.classifier_fraction_of_train, rngs[1], stratify)
    folds = []
    for k in range(spec.n_folds):
        fit, valid = _two_way(trigger, labels, spec.validation_fraction_of_trigger_train,
                              rngs[3 + k], stratify)
        folds.append((fit, valid))
    return DatasetSplit(clf, trigger, folds, test)


# -- posterior cache ---------------------------------------------------------

def validate_posteriors(P: np.ndarray, tol: float = ROW_SUM_TOL) -> np.ndarray:
    """Check probability rows; renormalise those off by at most ``tol``."""
    P = np.asarray(P, dtype=np.float64)
    if not np.all(np.isfinite(P)):
        raise DataError("posterior entries must be finite")
    if np.any(P < 0) or np.any(P > 1 + tol):
        raise DataError("posterior entries must lie in [0, 1]")
    sums = P.sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        where = np.argwhere(bad)[0]
        raise DataError(f"posterior row {tuple(int(i) for i in where)} sums to {sums[tuple(where)]!r}")
    # rows already normalised to float precision are left untouched (exact round trip)
    fix = np.abs(sums - 1.0) > 1e-12
    if np.any(fix):
        P = P.copy()
        P[fix] = P[fix] / sums[fix][:, None]
    return P


def write_posterior_cache(cache: np.ndarray, path) -> None:
    """Header ``#<series> <K> <classes>``, then one line per (series, checkpoint)."""
    cache = np.asarray(cache, dtype=np.float64)
    if cache.ndim != 3:
        raise DataError("posterior cache must have shape (series, K, classes)")
    n, K, C = cache.shape
    with open(path, "w") as fh:
        fh.write(f"#{n} {K} {C}\n")
        for row in cache.reshape(n * K, C):
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_posterior_cache(path) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing '#series K classes' header")
    try:
        n, K, C = (int(v) for v in lines[0][1:].split())
    except ValueError as exc:
        raise DataError(f"{path}: malformed header {lines[0]!r}") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n * K:
        raise DataError(f"{path}: expected {n * K} rows, found {len(body)}")
    rows = []
    for i, ln in enumerate(body, start=2):
        cells = ln.split()
        if len(cells) != C:
            raise DataError(f"{path}: line {i} has {len(cells)} entries, expected {C}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataError(f"{path}: line {i}: {exc}") from exc
    P = np.asarray(rows, dtype=np.float64).reshape(n, K, C)
    return validate_posteriors(P)
