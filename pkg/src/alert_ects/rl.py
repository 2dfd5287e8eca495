"""Offline Double-DQN trigger (ALERT).

Transitions are enumerated exhaustively from the training posteriors (both
actions at every checkpoint), a one-hidden-layer Q-network with layer
normalisation is trained with Adam and soft target updates, and the final
network is picked by validation AvgCost across several train/validation folds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .classifier import ALERT_STAR, StateEncoder, TriggerState, state_vector
from .core import CostModel, InputError, argmax_lowest, trigger_costs
from .textio import TextReader, TextWriter
from .triggers import TriggerPolicy, first_trigger

logger = logging.getLogger(__name__)

WAIT, TRIGGER = 0, 1
LN_EPS = 1e-5
PARAM_NAMES = ("W1", "b1", "ln_gain", "ln_bias", "W2", "b2")


class TrainingError(RuntimeError):
    pass


# -- Q-network ----------------------------------------------------------------------

class QNetwork:
    """``input -> Linear(hidden) -> LayerNorm -> ReLU -> Linear(2)``.

    Outputs are ``(Q(s, wait), Q(s, trigger))``.
    """

    def __init__(self, n_inputs: int, hidden: int = 32, rng: np.random.Generator | None = None,
                 params: dict | None = None):
        self.n_inputs = n_inputs
        self.hidden = hidden
        if params is not None:
            self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_NAMES}
            return
        rng = np.random.default_rng(0) if rng is None else rng
        lim1 = 1.0 / np.sqrt(n_inputs)
        lim2 = 1.0 / np.sqrt(hidden)
        self.params = {
            "W1": rng.uniform(-lim1, lim1, (n_inputs, hidden)),
            "b1": rng.uniform(-lim1, lim1, hidden),
            "ln_gain": np.ones(hidden),
            "ln_bias": np.zeros(hidden),
            "W2": rng.uniform(-lim2, lim2, (hidden, 2)),
            "b2": rng.uniform(-lim2, lim2, 2),
        }

    @classmethod
    def zeros(cls, n_inputs: int, hidden: int = 32) -> "QNetwork":
        p = {"W1": np.zeros((n_inputs, hidden)), "b1": np.zeros(hidden), "ln_gain": np.zeros(hidden),
             "ln_bias": np.zeros(hidden), "W2": np.zeros((hidden, 2)), "b2": np.zeros(2)}
        return cls(n_inputs, hidden, params=p)

    def copy(self) -> "QNetwork":
        return QNetwork(self.n_inputs, self.hidden, params=self.params)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def forward(self, X: np.ndarray, return_cache: bool = False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[-1] != self.n_inputs:
            raise InputError(f"state dimension {X.shape[-1]} does not match network input {self.n_inputs}")
        p = self.params
        inv_h = 1.0 / self.hidden
        z = X @ p["W1"] + p["b1"]
        zc = z - z.sum(axis=1, keepdims=True) * inv_h
        inv_std = 1.0 / np.sqrt(np.einsum("ij,ij->i", zc, zc)[:, None] * inv_h + LN_EPS)
        zhat = zc * inv_std
        a = zhat * p["ln_gain"] + p["ln_bias"]
        h = np.maximum(a, 0.0)
        q = h @ p["W2"] + p["b2"]
        if return_cache:
            return q, (X, zhat, inv_std, a, h)
        return q

    def backward(self, cache, dq: np.ndarray) -> dict:
        """Parameter gradients given ``dL/dQ`` of shape ``(n, 2)``."""
        X, zhat, inv_std, a, h = cache
        p = self.params
        inv_h = 1.0 / self.hidden
        g = {"W2": h.T @ dq, "b2": dq.sum(axis=0)}
        da = (dq @ p["W2"].T) * (a > 0)
        g["ln_gain"] = np.einsum("ij,ij->j", da, zhat)
        g["ln_bias"] = da.sum(axis=0)
        dzhat = da * p["ln_gain"]
        dz = inv_std * (dzhat - dzhat.sum(axis=1, keepdims=True) * inv_h
                        - zhat * (np.einsum("ij,ij->i", dzhat, zhat)[:, None] * inv_h))
        g["W1"] = X.T @ dz
        g["b1"] = dz.sum(axis=0)
        return g

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, v: np.ndarray) -> None:
        i = 0
        for k in PARAM_NAMES:
            n = self.params[k].size
            self.params[k] = np.asarray(v[i:i + n], dtype=np.float64).reshape(self.params[k].shape)
            i += n

    def write(self, w: TextWriter) -> None:
        w.scalar("inputs", self.n_inputs).scalar("hidden", self.hidden)
        for k in PARAM_NAMES:
            w.matrix(k, self.params[k].reshape(-1, self.params[k].shape[-1]) if self.params[k].ndim > 1
                     else self.params[k][None, :])

    @classmethod
    def read(cls, r: TextReader) -> "QNetwork":
        n_in, hidden = r.scalar("inputs", int), r.scalar("hidden", int)
        params = {}
        for k in PARAM_NAMES:
            m = r.matrix(k)
            params[k] = m if k in ("W1", "W2") else m[0]
        return cls(n_in, hidden, params=params)

    def save(self, path) -> None:
        w = TextWriter("alert-ects-qnet", 1)
        self.write(w)
        w.save(path)

    @classmethod
    def load(cls, path) -> "QNetwork":
        return cls.read(TextReader.open(path, "alert-ects-qnet"))


def td_loss_and_grads(net: QNetwork, states, actions, targets):
    """Mean squared TD error on the taken actions and its parameter gradients."""
    q, cache = net.forward(states, return_cache=True)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / len(actions)
    return float(np.mean(err ** 2)), net.backward(cache, dq)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def soft_update(target: QNetwork, online: QNetwork, tau: float) -> None:
    for k in PARAM_NAMES:
        target.params[k] = (1.0 - tau) * target.params[k] + tau * online.params[k]


# -- transitions --------------------------------------------------------------------

@dataclass
class TransitionSet:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray  # rows of terminal transitions are unused zeros
    terminal: np.ndarray
    series: np.ndarray = field(default=None)
    checkpoint: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.actions)

    def scaled(self, factor: float) -> "TransitionSet":
        return replace(self, rewards=self.rewards * factor)


def delay_increments(delays: np.ndarray) -> np.ndarray:
    """``C_d(t_1)`` at the first checkpoint, then successive differences."""
    return np.diff(delays, prepend=0.0)


def extract_transitions(P, y, encoder: StateEncoder, costs: CostModel, features=ALERT_STAR,
                        mode: str = "shaped") -> TransitionSet:
    """Every (series, checkpoint, action) pair of the training posteriors.

    Waiting is not offered at the last checkpoint.
    """
    if mode not in ("shaped", "delayed"):
        raise InputError(f"unknown reward mode {mode!r}")
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    S = encoder.encode(P, features)
    n, K, d = S.shape
    a = costs.alpha
    delays = costs.delay(encoder.checkpoints)
    cm = costs.misclassify(argmax_lowest(P), y[:, None])  # (n, K)
    if mode == "shaped":
        step = (1.0 - a) * delay_increments(delays)
        r_wait = np.broadcast_to(-step, (n, K))
        r_trig = -a * cm - step[None, :]
    else:
        r_wait = np.zeros((n, K))
        r_trig = -a * cm - (1.0 - a) * delays[None, :]

    ser, chk = np.meshgrid(np.arange(n), np.arange(K), indexing="ij")
    w_ser, w_chk = ser[:, :-1].ravel(), chk[:, :-1].ravel()
    t_ser, t_chk = ser.ravel(), chk.ravel()
    states = np.concatenate([S[w_ser, w_chk], S[t_ser, t_chk]])
    next_states = np.concatenate([S[w_ser, w_chk + 1], np.zeros((len(t_ser), d))])
    actions = np.concatenate([np.full(len(w_ser), WAIT), np.full(len(t_ser), TRIGGER)])
    rewards = np.concatenate([r_wait[w_ser, w_chk], r_trig[t_ser, t_chk]])
    terminal = np.concatenate([np.zeros(len(w_ser), bool), np.ones(len(t_ser), bool)])
    return TransitionSet(states, actions.astype(np.int64), rewards, next_states, terminal,
                         np.concatenate([w_ser, t_ser]), np.concatenate([w_chk, t_chk]))


# -- training -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    tau: float = 3e-3
    gamma: float = 1.0
    batch_size: int = 256
    max_epochs: int = 200
    validate_every: int = 5
    n_splits: int = 3
    reward_mode: str = "shaped"
    hidden: int = 32
    reward_scale: float | None = None  # None: divide rewards by their largest magnitude
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0
                and self.validate_every > 0 and self.n_splits > 0 and self.hidden > 0):
            raise InputError("training sizes and rates must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise InputError("tau must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise InputError("gamma must lie in [0, 1]")
        if self.reward_mode not in ("shaped", "delayed"):
            raise InputError(f"unknown reward mode {self.reward_mode!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def td_targets(online: QNetwork, target: QNetwork, batch: TransitionSet, gamma: float) -> np.ndarray:
    """Double-DQN targets: online net picks the next action, target net scores it."""
    y = batch.rewards.copy()
    live = ~batch.terminal
    if np.any(live):
        s2 = batch.next_states[live]
        a2 = np.argmax(online.forward(s2), axis=1)
        y[live] += gamma * target.forward(s2)[np.arange(len(a2)), a2]
    return y


def _take(ts: TransitionSet, idx) -> TransitionSet:
    return TransitionSet(ts.states[idx], ts.actions[idx], ts.rewards[idx],
                         ts.next_states[idx], ts.terminal[idx])


def ddqn_epoch(online: QNetwork, target: QNetwork, transitions: TransitionSet, config: TrainConfig,
               optimizer: Adam, rng: np.random.Generator) -> float:
    """One shuffled pass over the transitions; returns the mean TD loss."""
    if len(transitions) == 0:
        raise InputError("empty transition set")
    order = rng.permutation(len(transitions))
    losses = []
    for s in range(0, len(order), config.batch_size):
        batch = _take(transitions, order[s:s + config.batch_size])
        y = td_targets(online, target, batch, config.gamma)
        loss, grads = td_loss_and_grads(online, batch.states, batch.actions, y)
        optimizer.step(online.params, grads)
        soft_update(target, online, config.tau)
        losses.append(loss)
    return float(np.mean(losses))


def greedy_trigger_mask(net: QNetwork, S: np.ndarray) -> np.ndarray:
    """``(n, K, d)`` states to trigger decisions; equal Q-values trigger."""
    n, K, d = S.shape
    q = net.forward(S.reshape(n * K, d)).reshape(n, K, 2)
    return q[..., TRIGGER] >= q[..., WAIT]


def rollout_cost(net: QNetwork, S: np.ndarray, cost_matrix: np.ndarray) -> float:
    idx = first_trigger(greedy_trigger_mask(net, S))
    return float(np.mean(cost_matrix[np.arange(len(idx)), idx]))


@dataclass
class TrainingLog:
    epochs: np.ndarray  # snapshot epochs
    validation: np.ndarray  # (n_folds, n_snapshots) AvgCost
    losses: np.ndarray  # (n_folds, max_epochs)
    selected_epoch: int
    selected_fold: int
    reward_scale: float


def _reward_scale(config: TrainConfig, transitions: TransitionSet) -> float:
    if config.reward_scale is not None:
        return float(config.reward_scale)
    m = float(np.max(np.abs(transitions.rewards))) if len(transitions) else 0.0
    return m if m > 0 else 1.0


def train_alert(P, y, folds, encoder: StateEncoder, costs: CostModel,
                config: TrainConfig = TrainConfig(), features=ALERT_STAR) -> "AlertPolicy":
    """Train one network per fold, snapshot every ``validate_every`` epochs, pick
    the epoch with the lowest mean validation AvgCost and, at that epoch, the
    fold with the lowest validation AvgCost.

    ``folds`` is a list of ``(fit_idx, valid_idx)`` index arrays into ``P``.
    """
    P = np.asarray(P, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(folds) == 0:
        raise TrainingError("at least one validation fold is required")
    folds = list(folds)[: config.n_splits]
    S_all = encoder.encode(P, features)
    cost_all = trigger_costs(P, y, encoder.checkpoints, costs)
    whole = extract_transitions(P, y, encoder, costs, features, config.reward_mode)
    scale = _reward_scale(config, whole)

    snap_epochs = np.arange(config.validate_every, config.max_epochs + 1, config.validate_every)
    if len(snap_epochs) == 0:
        raise TrainingError("no validation snapshot would be recorded (validate_every > max_epochs)")
    seeds = np.random.SeedSequence(config.seed).spawn(len(folds))
    val = np.full((len(folds), len(snap_epochs)), np.inf)
    losses = np.zeros((len(folds), config.max_epochs))
    snapshots: list[list[dict]] = []
    for f, (fit_idx, valid_idx) in enumerate(folds):
        rng = np.random.default_rng(seeds[f])
        ts = extract_transitions(P[fit_idx], y[fit_idx], encoder, costs, features, config.reward_mode)
        ts = ts.scaled(1.0 / scale)
        online = QNetwork(S_all.shape[2], config.hidden, rng)
        target = online.copy()
        opt = Adam(online.params, lr=config.learning_rate)
        fold_snaps = []
        for epoch in range(1, config.max_epochs + 1):
            losses[f, epoch - 1] = ddqn_epoch(online, target, ts, config, opt, rng)
            if epoch % config.validate_every == 0:
                j = epoch // config.validate_every - 1
                val[f, j] = rollout_cost(online, S_all[valid_idx], cost_all[valid_idx])
                fold_snaps.append({k: v.copy() for k, v in online.params.items()})
        snapshots.append(fold_snaps)
        logger.debug("fold %d: best validation AvgCost %.4f", f, val[f].min())

    j_star = int(np.argmin(val.mean(axis=0)))
    f_star = int(np.argmin(val[:, j_star]))
    net = QNetwork(S_all.shape[2], config.hidden, params=snapshots[f_star][j_star])
    log = TrainingLog(snap_epochs, val, losses, int(snap_epochs[j_star]), f_star, scale)
    return AlertPolicy(net, tuple(features), encoder, log)


def tabular_q_values(state_ids, actions, rewards, next_ids, terminal, n_states: int,
                     gamma: float = 1.0, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Value iteration on the empirical MDP of a discrete transition set.

    Each ``(state, action)`` pair gets the mean reward and the empirical
    next-state distribution of its samples. Returns ``Q`` of shape
    ``(n_states, 2)``; pairs never observed are ``-inf``.
    """
    s = np.asarray(state_ids, dtype=np.int64)
    a = np.asarray(actions, dtype=np.int64)
    r = np.asarray(rewards, dtype=np.float64)
    s2 = np.asarray(next_ids, dtype=np.int64)
    term = np.asarray(terminal, dtype=bool)
    counts = np.zeros((n_states, 2))
    np.add.at(counts, (s, a), 1.0)
    R = np.zeros((n_states, 2))
    np.add.at(R, (s, a), r)
    seen = counts > 0
    R[seen] /= counts[seen]
    T = np.zeros((n_states, 2, n_states))
    live = ~term
    np.add.at(T, (s[live], a[live], s2[live]), 1.0)
    T[seen] /= counts[seen][:, None]
    Q = np.where(seen, 0.0, -np.inf)
    for _ in range(max_iter):
        V = np.max(Q, axis=1)
        V = np.where(np.isfinite(V), V, 0.0)
        new = np.where(seen, R + gamma * T @ V, -np.inf)
        delta = np.max(np.abs(new[seen] - Q[seen])) if np.any(seen) else 0.0
        Q = new
        if delta <= tol:
            break
    return Q


# -- policy -------------------------------------------------------------------------

def alert_decide(q_values) -> bool:
    """Greedy action on ``(Q_wait, Q_trigger)``; a tie triggers."""
    q = np.asarray(q_values, dtype=np.float64)
    return bool(q[TRIGGER] >= q[WAIT])


class AlertPolicy(TriggerPolicy):
    name = "alert"

    def __init__(self, network: QNetwork, features=ALERT_STAR, encoder: StateEncoder | None = None,
                 log: TrainingLog | None = None):
        self.network = network
        self.features = tuple(features)
        self.encoder = encoder
        self.log = log

    def q_values(self, state: TriggerState, posterior) -> np.ndarray:
        return self.network.forward(state_vector(state, posterior, self.features))[0]

    def decide(self, state, posterior, k):
        return alert_decide(self.q_values(state, posterior))

    def trigger_mask(self, P, encoder):
        return greedy_trigger_mask(self.network, encoder.encode(P, self.features))

    def write(self, w):
        w.scalar("features", ",".join(self.features))
        self.network.write(w)

    @classmethod
    def read(cls, r):
        features = tuple(r.scalar("features", str).split(","))
        return cls(QNetwork.read(r), features)


# -- decision surface ---------------------------------------------------------------

def decision_surface(policy: TriggerPolicy, encoder: StateEncoder, n_time: int = 20,
                     n_prob: int = 21, n_classes: int = 2, predicted_class: int = 0,
                     confidence_bin: float | None = None):
    """Wait(0)/trigger(1) grid over (max posterior rows, t/T columns).

    The posterior puts the max probability on ``predicted_class`` and spreads the
    rest evenly; the confidence bin comes from the fitted bins at the nearest
    checkpoint unless fixed. Returns ``(prob_grid, time_grid, decisions)``.
    """
    if n_time < 2 or n_prob < 2:
        raise InputError("grid resolutions must be at least 2")
    times = np.linspace(encoder.checkpoints[0] / encoder.length, 1.0, n_time)
    probs = np.linspace(1.0 / n_classes, 1.0, n_prob)
    cp_times = encoder.checkpoints / encoder.length
    out = np.zeros((n_prob, n_time), dtype=np.int64)
    for j, tt in enumerate(times):
        k = int(np.argmin(np.abs(cp_times - tt)))
        for i, p in enumerate(probs):
            post = np.full(n_classes, (1.0 - p) / (n_classes - 1))
            post[predicted_class] = p
            s = encoder.state(post, k)
            conf = s.confidence_bin if confidence_bin is None else confidence_bin
            s = TriggerState(s.max_posterior, s.margin, s.predicted_class_onehot, conf, float(tt))
            out[i, j] = int(policy.decide(s, post, k))
    return probs, times, out


def write_surface_csv(path, probs, times, decisions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["max_posterior"] + [f"{t:.17g}" for t in times])
        for p, row in zip(probs, decisions):
            w.writerow([f"{p:.17g}"] + [int(v) for v in row])
