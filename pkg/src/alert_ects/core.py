"""Domain types, the cost model and cost-based metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DELAY_SCALE = 100.0
MINORITY_FACTOR = 100.0
N_CHECKPOINTS = 20


class InputError(ValueError):
    """Raised on arguments outside an operation's domain."""


class DataError(ValueError):
    """Raised when data is inconsistent (shapes, missing rows, bad sums)."""


def default_checkpoints(length: int, n_checkpoints: int = N_CHECKPOINTS) -> np.ndarray:
    """Decision times ``ceil(k * T / n)`` for ``k = 1..n``, deduplicated."""
    if length < 1:
        raise InputError(f"series length must be positive, got {length}")
    ks = np.arange(1, n_checkpoints + 1)
    # integer ceil avoids float drift on exact multiples
    cps = -((-ks * length) // n_checkpoints)
    return np.unique(cps).astype(np.int64)


def delay_cost(t, T: int, scale: float = DELAY_SCALE):
    """Exponential delay cost ``exp(t / T * log(scale))``.

    Accepts a scalar or an array of times; every time must lie in ``[1, T]``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise InputError(f"time index out of range [1, {T}]: {t}")
    out = np.exp(t_arr / T * math.log(scale))
    return float(out) if out.ndim == 0 else out


def misclassification_cost(predicted: int, truth: int, minority: int,
                           n_classes: int | None = None,
                           factor: float = MINORITY_FACTOR) -> float:
    if n_classes is not None:
        for c in (predicted, truth, minority):
            if not 0 <= c < n_classes:
                raise InputError(f"unknown class {c} (n_classes={n_classes})")
    if predicted == truth:
        return 0.0
    return factor if truth == minority else 1.0


def misclassification_matrix(n_classes: int, minority: int,
                             factor: float = MINORITY_FACTOR) -> np.ndarray:
    """Matrix ``M[truth, predicted]`` of the imbalanced misclassification cost."""
    m = np.ones((n_classes, n_classes))
    m[minority, :] = factor
    np.fill_diagonal(m, 0.0)
    return m


@dataclass(frozen=True)
class LabeledSeries:
    values: np.ndarray  # (channels, T)
    label: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[1] < 2:
            raise InputError("a series needs at least 2 time steps")
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SeriesDataset:
    """Equal-length labelled series stored as arrays.

    ``X`` has shape ``(n_series, n_channels, T)``; ``y`` holds class indices
    into ``classes`` (the original label values, sorted).
    """

    X: np.ndarray
    y: np.ndarray
    classes: tuple = ()
    checkpoints: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 2:
            X = X[:, None, :]
        if X.ndim != 3:
            raise InputError(f"X must be 2-D or 3-D, got shape {X.shape}")
        if X.shape[2] < 2:
            raise InputError("series length must be at least 2")
        y = np.asarray(self.y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise InputError("one label per series required")
        classes = tuple(self.classes) if len(self.classes) else tuple(range(int(y.max()) + 1 if len(y) else 0))
        if len(y) and (y.min() < 0 or y.max() >= len(classes)):
            raise InputError("label index outside the class set")
        cps = default_checkpoints(X.shape[2]) if self.checkpoints is None else np.asarray(self.checkpoints, dtype=np.int64)
        if len(cps) == 0 or np.any(np.diff(cps) <= 0) or cps[0] < 1 or cps[-1] != X.shape[2]:
            raise InputError("checkpoints must be strictly increasing and end at T")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "checkpoints", cps)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def minority_class(self) -> int:
        """Least frequent class index; ties go to the lowest index."""
        counts = np.bincount(self.y, minlength=self.n_classes)
        return int(np.argmin(counts))

    @property
    def series(self) -> Iterator[LabeledSeries]:
        for x, label in zip(self.X, self.y):
            yield LabeledSeries(x, int(label))

    def subset(self, idx) -> "SeriesDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SeriesDataset(self.X[idx], self.y[idx], self.classes, self.checkpoints, self.name)


@dataclass(frozen=True)
class CostModel:
    """Misclassification matrix ``misclassification[truth, predicted]``,
    exponential delay cost over ``[1, T]`` and the weight ``alpha``.

    The weighted loss is ``alpha * C_m + (1 - alpha) * C_d``.
    """

    misclassification: np.ndarray
    T: int
    alpha: float = 0.5
    delay_scale: float = DELAY_SCALE

    def __post_init__(self):
        m = np.asarray(self.misclassification, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InputError("misclassification costs must be a square matrix")
        if np.any(m < 0) or np.any(np.diag(m) != 0):
            raise InputError("misclassification costs must be >= 0 with a zero diagonal")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.delay_scale < 1.0:
            raise InputError("delay scale below 1 gives a decreasing delay cost")
        object.__setattr__(self, "misclassification", m)

    @classmethod
    def standard(cls, n_classes: int, minority: int, T: int, alpha: float = 0.5,
                 delay_scale: float = DELAY_SCALE, minority_factor: float = MINORITY_FACTOR) -> "CostModel":
        return cls(misclassification_matrix(n_classes, minority, minority_factor), T, alpha, delay_scale)

    @classmethod
    def for_dataset(cls, dataset: SeriesDataset, alpha: float = 0.5, **kw) -> "CostModel":
        return cls.standard(dataset.n_classes, dataset.minority_class, dataset.T, alpha, **kw)

    def with_alpha(self, alpha: float) -> "CostModel":
        return CostModel(self.misclassification, self.T, alpha, self.delay_scale)

    @property
    def n_classes(self) -> int:
        return self.misclassification.shape[0]

    def delay(self, t):
        return delay_cost(t, self.T, self.delay_scale)

    def misclassify(self, predicted, truth):
        return self.misclassification[truth, predicted]

    def weighted(self, predicted, truth, t):
        """Weighted loss; broadcasts over array arguments."""
        return self.alpha * self.misclassify(predicted, truth) + (1.0 - self.alpha) * self.delay(t)


@dataclass(frozen=True)
class EpisodeOutcome:
    predicted: int
    truth: int
    trigger_time: int


@dataclass(frozen=True)
class MetricReport:
    avg_cost: float
    avg_delay_cost: float
    avg_misclassification_cost: float
    mean_trigger_time: float
    accuracy: float
    alpha: float = 0.5

    @property
    def unweighted_avg_cost(self) -> float:
        """Plain ``mean(C_m) + mean(C_d)`` (equals ``2 * avg_cost`` at alpha 0.5)."""
        return self.avg_misclassification_cost + self.avg_delay_cost

    def as_dict(self) -> dict:
        return {
            "avg_cost": self.avg_cost,
            "avg_delay_cost": self.avg_delay_cost,
            "avg_misclassification_cost": self.avg_misclassification_cost,
            "unweighted_avg_cost": self.unweighted_avg_cost,
            "mean_trigger_time": self.mean_trigger_time,
            "accuracy": self.accuracy,
            "alpha": self.alpha,
        }


def episode_loss(outcome: EpisodeOutcome, costs: CostModel) -> float:
    return float(costs.weighted(outcome.predicted, outcome.truth, outcome.trigger_time))


def unweighted_loss(outcome: EpisodeOutcome, costs: CostModel) -> float:
    return float(costs.misclassify(outcome.predicted, outcome.truth) + costs.delay(outcome.trigger_time))


def average_cost(outcomes: Sequence[EpisodeOutcome], costs: CostModel) -> MetricReport:
    if len(outcomes) == 0:
        raise InputError("average_cost needs at least one outcome")
    pred = np.array([o.predicted for o in outcomes], dtype=np.int64)
    truth = np.array([o.truth for o in outcomes], dtype=np.int64)
    times = np.array([o.trigger_time for o in outcomes], dtype=np.float64)
    return report_from_arrays(pred, truth, times, costs)


def report_from_arrays(pred: np.ndarray, truth: np.ndarray, times: np.ndarray,
                       costs: CostModel) -> MetricReport:
    cm = costs.misclassify(pred, truth)
    cd = np.atleast_1d(costs.delay(times))
    a = costs.alpha
    return MetricReport(
        avg_cost=float(np.mean(a * cm + (1.0 - a) * cd)),
        avg_delay_cost=float(np.mean(cd)),
        avg_misclassification_cost=float(np.mean(cm)),
        mean_trigger_time=float(np.mean(times)),
        accuracy=float(np.mean(pred == truth)),
        alpha=a,
    )


def argmax_lowest(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Argmax with ties broken towards the lowest index (numpy's rule, made explicit)."""
    return np.argmax(p, axis=axis)


def trigger_costs(posteriors: np.ndarray, labels: np.ndarray, checkpoints: np.ndarray,
                  costs: CostModel) -> np.ndarray:
    """Weighted cost of triggering at every checkpoint, shape ``(n_series, K)``."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if posteriors.ndim != 3 or posteriors.shape[1] != len(checkpoints):
        raise DataError(
            f"posteriors must have shape (n, {len(checkpoints)}, n_classes), got {posteriors.shape}")
    if not np.all(np.isfinite(posteriors)):
        raise DataError("posteriors contain missing (non-finite) entries")
    pred = argmax_lowest(posteriors)
    labels = np.asarray(labels, dtype=np.int64)[:, None]
    return costs.alpha * costs.misclassify(pred, labels) + (1.0 - costs.alpha) * costs.delay(checkpoints)[None, :]


def oracle_trigger_indices(posteriors, labels, checkpoints, costs: CostModel) -> np.ndarray:
    """Per-series hindsight-optimal checkpoint index (earliest on ties)."""
    return np.argmin(trigger_costs(posteriors, labels, checkpoints, costs), axis=1)


def oracle_avg_cost(posteriors, labels, checkpoints, costs: CostModel) -> float:
    """Best achievable AvgCost given the classifier's predictions and true labels."""
    return float(np.mean(np.min(trigger_costs(posteriors, labels, checkpoints, costs), axis=1)))


def outcomes_from_indices(posteriors, labels, checkpoints, idx) -> list[EpisodeOutcome]:
    posteriors = np.asarray(posteriors)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(len(idx))
    pred = argmax_lowest(posteriors[rows, idx])
    return [EpisodeOutcome(int(p), int(y), int(checkpoints[k])) for p, y, k in zip(pred, labels, idx)]
