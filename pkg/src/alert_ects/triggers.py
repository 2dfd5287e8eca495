"""Hand-designed trigger rules: probability threshold, stopping rule, the
confidence-bin Markov-chain rule (Economy) and backward-induction regressors
(Calimera)."""

from __future__ import annotations

import itertools

import numpy as np

from .classifier import BinTable, FitError, StateEncoder, TriggerState, ridge_fit, top_two
from .core import (CostModel, EpisodeOutcome, MetricReport, argmax_lowest, report_from_arrays,
                   trigger_costs)
from .textio import TextReader, TextWriter

THRESHOLD_GRID = np.arange(101) / 100.0
GAMMA_AXIS = np.arange(-10, 11) / 10.0
CALIMERA_RIDGE = 1e-2


def first_trigger(mask: np.ndarray) -> np.ndarray:
    """Index of the first trigger per row; the last checkpoint always triggers."""
    mask = np.array(mask, dtype=bool, copy=True)
    mask[..., -1] = True
    return np.argmax(mask, axis=-1)


def policy_cost(cost_matrix: np.ndarray, mask: np.ndarray) -> float:
    idx = first_trigger(mask)
    return float(np.mean(np.take_along_axis(cost_matrix, idx[..., None], axis=-1)))


class TriggerPolicy:
    """Common interface. ``trigger_mask`` is the vectorised form of ``decide``."""

    name = "policy"

    def fit(self, P, y, encoder: StateEncoder, costs: CostModel):
        return self

    def decide(self, state: TriggerState, posterior, k: int) -> bool:
        raise NotImplementedError

    def trigger_mask(self, P: np.ndarray, encoder: StateEncoder) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        out = np.zeros(P.shape[:2], dtype=bool)
        for i in range(P.shape[0]):
            for k in range(P.shape[1]):
                out[i, k] = self.decide(encoder.state(P[i, k], k), P[i, k], k)
        return out

    def write(self, w: TextWriter) -> None:
        raise NotImplementedError


class AlwaysTrigger(TriggerPolicy):
    name = "always_trigger"

    def decide(self, state, posterior, k):
        return True

    def trigger_mask(self, P, encoder):
        return np.ones(np.shape(P)[:2], dtype=bool)


class NeverTrigger(TriggerPolicy):
    name = "never_trigger"

    def decide(self, state, posterior, k):
        return False

    def trigger_mask(self, P, encoder):
        return np.zeros(np.shape(P)[:2], dtype=bool)


# -- Proba Threshold ------------------------------------------------------------

def threshold_grid_costs(max_posteriors: np.ndarray, cost_matrix: np.ndarray,
                         grid=THRESHOLD_GRID) -> np.ndarray:
    return np.array([policy_cost(cost_matrix, max_posteriors >= th) for th in grid])


class ProbaThreshold(TriggerPolicy):
    """Trigger once the max posterior reaches ``theta``."""

    name = "proba_threshold"

    def __init__(self, theta: float | None = None):
        self.theta = theta

    def fit(self, P, y, encoder, costs):
        P = np.asarray(P, dtype=np.float64)
        if P.shape[0] == 0:
            raise FitError("no training posteriors")
        cm = trigger_costs(P, y, encoder.checkpoints, costs)
        grid_costs = threshold_grid_costs(P.max(axis=2), cm)
        self.theta = float(THRESHOLD_GRID[np.argmin(grid_costs)])
        return self

    def decide(self, state, posterior, k):
        return state.max_posterior >= self.theta

    def trigger_mask(self, P, encoder):
        return np.asarray(P).max(axis=2) >= self.theta

    def write(self, w):
        w.scalar("theta", self.theta)

    @classmethod
    def read(cls, r):
        return cls(r.scalar("theta"))


# -- Stopping Rule --------------------------------------------------------------

def gamma_grid() -> np.ndarray:
    """All triples of the 21-point axis, in lexicographic order."""
    return np.array(list(itertools.product(GAMMA_AXIS, repeat=3)))


def stopping_rule_grid_costs(max_posteriors, margins, times, cost_matrix,
                             triples=None, chunk: int = 256) -> np.ndarray:
    triples = gamma_grid() if triples is None else np.asarray(triples)
    feats = np.stack([max_posteriors, margins, np.broadcast_to(times, max_posteriors.shape)], axis=-1)
    out = np.empty(len(triples))
    for s in range(0, len(triples), chunk):
        g = triples[s:s + chunk]
        score = np.einsum("nkf,gf->gnk", feats, g)
        idx = first_trigger(score > 0)  # (g, n)
        picked = np.take_along_axis(np.broadcast_to(cost_matrix, (len(g),) + cost_matrix.shape),
                                    idx[..., None], axis=-1)[..., 0]
        out[s:s + chunk] = picked.mean(axis=1)
    return out


class StoppingRule(TriggerPolicy):
    """Trigger when ``g1 * max_posterior + g2 * margin + g3 * t / T > 0``."""

    name = "stopping_rule"

    def __init__(self, gammas=None):
        self.gammas = None if gammas is None else tuple(float(g) for g in gammas)

    def fit(self, P, y, encoder, costs):
        P = np.asarray(P, dtype=np.float64)
        if P.shape[0] == 0:
            raise FitError("no training posteriors")
        cm = trigger_costs(P, y, encoder.checkpoints, costs)
        mx, margin = top_two(P)
        triples = gamma_grid()
        c = stopping_rule_grid_costs(mx, margin, encoder.checkpoints / encoder.length, cm, triples)
        self.gammas = tuple(float(v) for v in triples[np.argmin(c)])
        return self

    def _score(self, mx, margin, tt):
        g1, g2, g3 = self.gammas
        return g1 * mx + g2 * margin + g3 * tt

    def decide(self, state, posterior, k):
        return bool(self._score(state.max_posterior, state.margin, state.normalized_time) > 0)

    def trigger_mask(self, P, encoder):
        mx, margin = top_two(np.asarray(P, dtype=np.float64))
        return self._score(mx, margin, encoder.checkpoints / encoder.length) > 0

    def write(self, w):
        w.vector("gammas", np.array(self.gammas))

    @classmethod
    def read(cls, r):
        return cls(r.vector("gammas"))


# -- Economy ----------------------------------------------------------------------

def transition_matrices(bin_idx: np.ndarray, n_bins: int) -> np.ndarray:
    """Add-one smoothed bin-to-bin transition matrices between consecutive
    checkpoints, shape ``(K - 1, B, B)``."""
    n, K = bin_idx.shape
    counts = np.ones((max(K - 1, 0), n_bins, n_bins))
    for k in range(K - 1):
        np.add.at(counts[k], (bin_idx[:, k], bin_idx[:, k + 1]), 1.0)
    return counts / counts.sum(axis=2, keepdims=True)


def expected_misclassification(bin_idx, predicted, labels, n_bins: int,
                               misclassification: np.ndarray) -> np.ndarray:
    """Expected ``C_m`` per (checkpoint, bin) under add-one smoothed joint
    (truth, prediction) frequencies; shape ``(K, B)``."""
    n, K = bin_idx.shape
    C = misclassification.shape[0]
    out = np.empty((K, n_bins))
    for k in range(K):
        counts = np.ones((n_bins, C, C))
        np.add.at(counts, (bin_idx[:, k], labels, predicted[:, k]), 1.0)
        joint = counts / counts.sum(axis=(1, 2), keepdims=True)
        out[k] = np.einsum("byp,yp->b", joint, misclassification)
    return out


class Economy(TriggerPolicy):
    """Non-myopic rule over a Markov chain of confidence bins.

    At checkpoint ``k`` in bin ``b`` the expected weighted cost of triggering at
    every future checkpoint is forecast by pushing the bin distribution through
    the fitted transition matrices; the rule triggers when the present is the
    cheapest (ties trigger).
    """

    name = "economy"

    def __init__(self):
        self.bins: BinTable | None = None
        self.transitions: np.ndarray | None = None
        self.expected_cm: np.ndarray | None = None
        self.delay_weighted: np.ndarray | None = None
        self.alpha = 0.5
        self.table: np.ndarray | None = None

    def fit(self, P, y, encoder, costs):
        if encoder.bins is None:
            raise FitError("Economy needs fitted confidence bins")
        P = np.asarray(P, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.bins = encoder.bins
        B = self.bins.n_bins
        bidx = self.bins.indices(P.max(axis=2))
        self.transitions = transition_matrices(bidx, B)
        self.expected_cm = expected_misclassification(bidx, argmax_lowest(P), y, B, costs.misclassification)
        self.alpha = costs.alpha
        self.delay_weighted = (1.0 - costs.alpha) * costs.delay(encoder.checkpoints)
        self._build_table()
        return self

    def expected_costs(self, k: int, b: int) -> np.ndarray:
        """Forecast weighted cost of triggering at checkpoints ``k..K-1``."""
        K, B = self.expected_cm.shape
        dist = np.zeros(B)
        dist[b] = 1.0
        out = np.empty(K - k)
        for j, tau in enumerate(range(k, K)):
            out[j] = self.alpha * dist @ self.expected_cm[tau] + self.delay_weighted[tau]
            if tau < K - 1:
                dist = dist @ self.transitions[tau]
        return out

    def _build_table(self):
        K, B = self.expected_cm.shape
        self.table = np.zeros((K, B), dtype=bool)
        for k in range(K):
            for b in range(B):
                f = self.expected_costs(k, b)
                self.table[k, b] = f[0] <= f[1:].min() if len(f) > 1 else True

    def decide(self, state, posterior, k):
        b = int(self.bins.bin_index(state.max_posterior, k))
        return bool(self.table[k, b])

    def trigger_mask(self, P, encoder):
        bidx = self.bins.indices(np.asarray(P).max(axis=2))
        return self.table[np.arange(bidx.shape[1])[None, :], bidx]

    def write(self, w):
        self.bins.write(w)
        w.scalar("alpha", self.alpha).vector("delay_weighted", self.delay_weighted)
        w.matrix("expected_cm", self.expected_cm)
        for M in self.transitions:
            w.matrix("transition", M)

    @classmethod
    def read(cls, r):
        m = cls()
        m.bins = BinTable.read(r)
        m.alpha = r.scalar("alpha")
        m.delay_weighted = r.vector("delay_weighted")
        m.expected_cm = r.matrix("expected_cm")
        K = m.expected_cm.shape[0]
        m.transitions = np.array([r.matrix("transition") for _ in range(K - 1)]).reshape(
            max(K - 1, 0), m.bins.n_bins, m.bins.n_bins)
        m._build_table()
        return m


# -- Calimera ---------------------------------------------------------------------

def min_future_costs(cost_matrix: np.ndarray) -> np.ndarray:
    """Backward induction ``m_k = min(c_k, m_{k+1})`` with ``m_K = c_K``."""
    return np.minimum.accumulate(np.asarray(cost_matrix)[..., ::-1], axis=-1)[..., ::-1]


def calimera_targets(cost_matrix: np.ndarray) -> np.ndarray:
    """``cost_k - minFutureCost_{k+1}`` for ``k < K``: negative when stopping now
    beats every later checkpoint. Where it is negative it equals
    ``minFutureCost_k - minFutureCost_{k+1}``; unlike that clipped form it also
    records how much waiting gains."""
    c = np.asarray(cost_matrix)
    m = min_future_costs(c)
    return c[..., :-1] - m[..., 1:]


def calimera_features(P: np.ndarray) -> np.ndarray:
    mx, margin = top_two(P)
    return np.concatenate([P, mx[..., None], margin[..., None]], axis=-1)


class Calimera(TriggerPolicy):
    """Per-checkpoint ridge regressors of ``cost_now - minFutureCost_next``.
    A negative prediction means waiting is expected to lose, so it triggers."""

    name = "calimera"

    def __init__(self, ridge: float = CALIMERA_RIDGE):
        self.ridge = ridge
        self.weights: list = []
        self.biases: list = []

    def fit(self, P, y, encoder, costs):
        P = np.asarray(P, dtype=np.float64)
        if P.shape[0] == 0:
            raise FitError("no training posteriors")
        cm = trigger_costs(P, y, encoder.checkpoints, costs)
        target = calimera_targets(cm)
        F = calimera_features(P)
        self.weights, self.biases = [], []
        for k in range(P.shape[1] - 1):
            W, b = ridge_fit(F[:, k, :], target[:, k:k + 1], self.ridge)
            self.weights.append(W[:, 0])
            self.biases.append(float(b[0]))
        return self

    def predict_delta(self, P: np.ndarray) -> np.ndarray:
        F = calimera_features(np.asarray(P, dtype=np.float64))
        K = F.shape[-2]
        out = np.zeros(F.shape[:-1])
        for k in range(K - 1):
            out[..., k] = F[..., k, :] @ self.weights[k] + self.biases[k]
        return out

    def decide(self, state, posterior, k):
        if k >= len(self.weights):
            return True
        f = calimera_features(np.asarray(posterior, dtype=np.float64)[None, :])[0]
        return bool(f @ self.weights[k] + self.biases[k] < 0)

    def trigger_mask(self, P, encoder):
        d = self.predict_delta(P)
        mask = d < 0
        mask[..., -1] = True
        return mask

    def write(self, w):
        w.scalar("ridge", self.ridge).scalar("regressors", len(self.weights))
        for W, b in zip(self.weights, self.biases):
            w.scalar("bias", b).vector("weights", W)

    @classmethod
    def read(cls, r):
        m = cls(r.scalar("ridge"))
        for _ in range(r.scalar("regressors", int)):
            m.biases.append(r.scalar("bias"))
            m.weights.append(r.vector("weights"))
        return m


# -- running policies ---------------------------------------------------------------

def run_policy(policy: TriggerPolicy, posteriors: np.ndarray, label: int,
               encoder: StateEncoder) -> EpisodeOutcome:
    """Scan checkpoints in order; the first trigger wins, the last one is forced."""
    P = np.asarray(posteriors, dtype=np.float64)
    K = P.shape[0]
    for k in range(K):
        if k == K - 1 or policy.decide(encoder.state(P[k], k), P[k], k):
            return EpisodeOutcome(int(argmax_lowest(P[k])), int(label), int(encoder.checkpoints[k]))
    raise AssertionError("unreachable")


def evaluate_policy(policy: TriggerPolicy, P: np.ndarray, y: np.ndarray, encoder: StateEncoder,
                    costs: CostModel) -> tuple[MetricReport, np.ndarray, np.ndarray]:
    """Vectorised episodes; returns ``(report, trigger_indices, predictions)``."""
    P = np.asarray(P, dtype=np.float64)
    idx = first_trigger(policy.trigger_mask(P, encoder))
    pred = argmax_lowest(P[np.arange(len(idx)), idx])
    times = encoder.checkpoints[idx]
    return report_from_arrays(pred, np.asarray(y), times, costs), idx, pred


BASELINES = {
    "proba_threshold": ProbaThreshold,
    "stopping_rule": StoppingRule,
    "economy": Economy,
    "calimera": Calimera,
}


def save_policy(policy, path) -> None:
    w = TextWriter("alert-ects-policy", 1)
    w.scalar("type", policy.name)
    policy.write(w)
    w.save(path)


def load_policy(path):
    r = TextReader.open(path, "alert-ects-policy")
    kind = r.scalar("type", str)
    if kind in BASELINES:
        return BASELINES[kind].read(r)
    if kind == "alert":
        from .rl import AlertPolicy
        return AlertPolicy.read(r)
    raise FitError(f"unknown policy type {kind!r}")
