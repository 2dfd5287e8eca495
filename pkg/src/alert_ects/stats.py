"""Paired comparison statistics used by the benchmark reports."""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.stats import norm, rankdata

logger = logging.getLogger(__name__)

EXACT_MAX_N = 25
MIN_NONZERO = 5


def _signed_rank_inputs(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))  # average ranks on exact ties
    return d, ranks


def exact_signed_rank_distribution(ranks: np.ndarray) -> np.ndarray:
    """Counts of sign assignments per value of ``2 * W+`` (ranks may be halves)."""
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided p-value of the paired signed-rank test.

    Zero differences are dropped. Up to 25 non-zero pairs the null
    distribution is exact; beyond that a normal approximation with tie and
    continuity corrections is used. Fewer than 5 non-zero pairs give 1.
    """
    d, ranks = _signed_rank_inputs(a, b)
    n = len(d)
    if n < MIN_NONZERO:
        logger.warning("signed-rank test with %d non-zero differences; returning p = 1", n)
        return 1.0
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        counts = exact_signed_rank_distribution(ranks)
        total = counts.sum()
        w2 = int(round(2 * w_plus))
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return float(min(1.0, 2.0 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(max(z, 0.0))))


def holm_correction(p_values, level: float = 0.05) -> np.ndarray:
    """Step-down Holm rejections, returned in the input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for i, j in enumerate(order):
        if p[j] <= level / (m - i):
            reject[j] = True
        else:
            break
    return reject


def win_rate(costs_a, costs_b) -> float:
    """Share of paired entries where A is cheaper; exact ties count one half."""
    a = np.asarray(costs_a, dtype=np.float64)
    b = np.asarray(costs_b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("win rate needs two non-empty tables over the same datasets")
    return float((np.sum(a < b) + 0.5 * np.sum(a == b)) / a.size)


def rank_table(costs: np.ndarray) -> np.ndarray:
    """Per-row (dataset) ranks of the columns (methods); ties share the average rank."""
    return np.apply_along_axis(rankdata, 1, np.asarray(costs, dtype=np.float64))


def mean_ranks(costs: np.ndarray, n_boot: int = 1000, confidence: float = 0.9, seed: int = 0):
    """Mean rank per method and a percentile bootstrap interval over datasets.

    Returns ``(mean, lower, upper)`` arrays of length ``n_methods``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[1] < 2:
        raise ValueError("need a (datasets, methods) table with at least two methods")
    R = rank_table(costs)
    mean = R.mean(axis=0)
    rng = np.random.default_rng(seed)
    n = R.shape[0]
    boots = np.empty((n_boot, R.shape[1]))
    for i in range(n_boot):
        boots[i] = R[rng.integers(0, n, n)].mean(axis=0)
    tail = (1.0 - confidence) / 2.0 * 100.0
    lower, upper = np.percentile(boots, [tail, 100.0 - tail], axis=0)
    return mean, lower, upper


def pareto_front(points) -> np.ndarray:
    """Non-dominated rows of an ``(n, 2)`` array (minimisation), sorted by the
    first coordinate. Exact duplicates of a front point are all kept."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    keep = []
    best_y = np.inf  # min y over strictly smaller x
    i = 0
    while i < len(order):
        x = pts[order[i], 0]
        j = i
        while j < len(order) and pts[order[j], 0] == x:
            j += 1
        group = order[i:j]
        gmin = pts[group[0], 1]
        if gmin < best_y:
            keep.extend(g for g in group if pts[g, 1] == gmin)
        best_y = min(best_y, gmin)
        i = j
    return pts[keep]
