"""Per-checkpoint prefix classifiers, temperature calibration, confidence bins and
the trigger-state features derived from posteriors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .core import DataError, InputError, SeriesDataset, argmax_lowest
from .textio import TextReader, TextWriter

logger = logging.getLogger(__name__)

N_SUMMARY = 7
DEFAULT_RIDGE = 1e-2
DEFAULT_BINS = 10
TEMPERATURE_BOUNDS = (0.05, 20.0)
TEMPERATURE_TOL = 1e-3


class FitError(ValueError):
    pass


def summary_features(X: np.ndarray, t: int) -> np.ndarray:
    """Mean, std, trend slope, min, max, last value and mean-crossing count of
    each channel's prefix ``X[..., :t]``; returns ``(n_series, 7 * channels)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, None, :]
    P = X[:, :, :t]
    mean = P.mean(axis=2)
    std = P.std(axis=2)
    tt = np.arange(t, dtype=np.float64)
    tc = tt - tt.mean()
    denom = np.sum(tc ** 2)
    slope = (P @ tc) / denom if denom > 0 else np.zeros_like(mean)
    centred = P - mean[..., None]
    signs = np.signbit(centred)
    crossings = np.sum(signs[..., 1:] != signs[..., :-1], axis=2).astype(np.float64)
    feats = np.stack([mean, std, slope, P.min(axis=2), P.max(axis=2), P[:, :, -1], crossings], axis=2)
    return feats.reshape(X.shape[0], -1)


def golden_section(f, lo: float, hi: float, tol: float = TEMPERATURE_TOL) -> float:
    """Minimise a unimodal ``f`` on ``[lo, hi]`` until the bracket is narrower than ``tol``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(scores: np.ndarray, targets, bounds=TEMPERATURE_BOUNDS,
                    tol: float = TEMPERATURE_TOL) -> float:
    """Temperature minimising the negative log-likelihood of ``softmax(scores / T)``.

    ``targets`` is either a vector of class indices or a matrix of target
    probabilities (soft labels).
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros_like(scores)
        onehot[np.arange(len(targets)), targets.astype(np.int64)] = 1.0
        targets = onehot

    def nll(temp):
        return -np.mean(np.sum(targets * log_softmax(scores / temp, axis=1), axis=1))

    return golden_section(nll, *bounds, tol=tol)


def ridge_fit(F: np.ndarray, Y: np.ndarray, lam: float):
    """Closed-form ridge with an unpenalised intercept; returns ``(W, b)``."""
    f_mean = F.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Fc = F - f_mean
    A = Fc.T @ Fc + lam * np.eye(F.shape[1])
    W = np.linalg.solve(A, Fc.T @ (Y - y_mean))
    return W, y_mean - f_mean @ W


@dataclass
class _CheckpointModel:
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    weights: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    temperature: float = 1.0

    def scores(self, F: np.ndarray) -> np.ndarray:
        return ((F - self.feature_mean) / self.feature_scale) @ self.weights + self.bias

    def proba(self, F: np.ndarray) -> np.ndarray:
        return softmax(self.scores(F) / self.temperature, axis=1)


class PrefixClassifierChain:
    """One calibrated one-vs-rest ridge model per checkpoint.

    Parameters
    ----------
    ridge : float
        L2 penalty of the closed-form fit.
    calibrate : bool
        Hold out half of the training series to fit a temperature per checkpoint.
    seed : int
        Seed of the fit/calibration split.
    """

    def __init__(self, ridge: float = DEFAULT_RIDGE, calibrate: bool = True, seed: int = 0):
        self.ridge = ridge
        self.calibrate = calibrate
        self.seed = seed
        self.models_: list[_CheckpointModel] = []
        self.checkpoints_: np.ndarray | None = None
        self.n_classes_ = 0
        self.n_channels_ = 0
        self.length_ = 0

    def fit(self, dataset: SeriesDataset) -> "PrefixClassifierChain":
        y = dataset.y
        present = np.unique(y)
        if len(present) < 2:
            raise FitError("the classifier needs at least two classes in its training data")
        C = dataset.n_classes
        n = len(dataset)
        fit_idx = cal_idx = np.arange(n)
        if self.calibrate:
            rng = np.random.default_rng(self.seed)
            fit_parts, cal_parts = [], []
            for c in present:
                members = rng.permutation(np.flatnonzero(y == c))
                h = len(members) // 2
                cal_parts.append(members[:h])
                fit_parts.append(members[h:])
            fit_idx, cal_idx = np.concatenate(fit_parts), np.concatenate(cal_parts)
            if len(cal_idx) == 0:
                fit_idx = cal_idx = np.arange(n)

        Y = np.zeros((n, C))
        Y[np.arange(n), y] = 1.0
        self.models_ = []
        for t in dataset.checkpoints:
            F = summary_features(dataset.X, int(t))
            mu = F[fit_idx].mean(axis=0)
            sd = F[fit_idx].std(axis=0)
            sd[sd == 0] = 1.0
            Fs = (F - mu) / sd
            W, b = ridge_fit(Fs[fit_idx], Y[fit_idx], self.ridge)
            model = _CheckpointModel(mu, sd, W, b)
            if self.calibrate:
                model.temperature = fit_temperature(model.scores(F[cal_idx]), y[cal_idx])
            self.models_.append(model)
        self.checkpoints_ = dataset.checkpoints.copy()
        self.n_classes_ = C
        self.n_channels_ = dataset.X.shape[1]
        self.length_ = dataset.T
        return self

    @classmethod
    def from_weights(cls, checkpoints, length: int, weights, biases, temperatures=None,
                     n_channels: int = 1) -> "PrefixClassifierChain":
        """Build a chain from explicit per-checkpoint weights (features unscaled)."""
        chain = cls(calibrate=False)
        d = N_SUMMARY * n_channels
        temps = np.ones(len(checkpoints)) if temperatures is None else temperatures
        chain.models_ = [
            _CheckpointModel(np.zeros(d), np.ones(d), np.asarray(W, float), np.asarray(b, float), float(tau))
            for W, b, tau in zip(weights, biases, temps)
        ]
        chain.checkpoints_ = np.asarray(checkpoints, dtype=np.int64)
        chain.n_classes_ = np.asarray(weights[0]).shape[1]
        chain.n_channels_ = n_channels
        chain.length_ = length
        return chain

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([m.temperature for m in self.models_])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Posteriors for every series at every checkpoint, shape ``(n, K, C)``."""
        if not self.models_:
            raise FitError("chain is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[:, None, :]
        if X.shape[2] != self.length_ or X.shape[1] != self.n_channels_:
            raise InputError(f"series must have shape (channels={self.n_channels_}, T={self.length_}), "
                             f"got {X.shape[1:]}")
        out = np.empty((X.shape[0], len(self.models_), self.n_classes_))
        for k, (t, m) in enumerate(zip(self.checkpoints_, self.models_)):
            out[:, k, :] = m.proba(summary_features(X, int(t)))
        return out

    def posteriors(self, series) -> np.ndarray:
        """PosteriorSequence ``(K, C)`` for a single series."""
        x = np.asarray(getattr(series, "values", series), dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        return self.predict_proba(x[None])[0]

    def save(self, path, bins: "BinTable | None" = None) -> None:
        w = TextWriter("alert-ects-chain", 1)
        w.scalar("length", self.length_).scalar("channels", self.n_channels_)
        w.scalar("classes", self.n_classes_).scalar("ridge", self.ridge)
        w.vector("checkpoints", self.checkpoints_)
        for m in self.models_:
            w.scalar("temperature", m.temperature)
            w.vector("feature_mean", m.feature_mean).vector("feature_scale", m.feature_scale)
            w.vector("bias", m.bias).matrix("weights", m.weights)
        if bins is not None:
            bins.write(w)
        w.save(path)

    @classmethod
    def load(cls, path):
        """Return ``(chain, bins_or_None)``."""
        r = TextReader.open(path, "alert-ects-chain")
        chain = cls(calibrate=False)
        chain.length_ = r.scalar("length", int)
        chain.n_channels_ = r.scalar("channels", int)
        chain.n_classes_ = r.scalar("classes", int)
        chain.ridge = r.scalar("ridge")
        chain.checkpoints_ = r.vector("checkpoints")
        for _ in chain.checkpoints_:
            tau = r.scalar("temperature")
            mu, sd = r.vector("feature_mean"), r.vector("feature_scale")
            b = r.vector("bias")
            W = r.matrix("weights")
            chain.models_.append(_CheckpointModel(mu, sd, W, b, tau))
        bins = BinTable.read(r) if r.peek_key() == "bins" else None
        return chain, bins


# -- confidence bins ----------------------------------------------------------

@dataclass(frozen=True)
class BinTable:
    """Equal-frequency cut points of the max posterior, one list per checkpoint."""

    cuts: tuple  # of 1-D arrays
    n_bins: int

    def bin_index(self, max_posterior, k: int):
        return np.searchsorted(self.cuts[k], max_posterior, side="right")

    def scaled(self, max_posterior, k: int):
        if self.n_bins <= 1:
            return np.zeros_like(np.asarray(max_posterior, dtype=np.float64))
        return self.bin_index(max_posterior, k) / (self.n_bins - 1)

    def indices(self, max_posteriors: np.ndarray) -> np.ndarray:
        """Bin index for an ``(n, K)`` matrix of max posteriors."""
        out = np.empty(max_posteriors.shape, dtype=np.int64)
        for k in range(max_posteriors.shape[1]):
            out[:, k] = self.bin_index(max_posteriors[:, k], k)
        return out

    def write(self, w: TextWriter) -> None:
        w.scalar("bins", self.n_bins).scalar("bin_checkpoints", len(self.cuts))
        for c in self.cuts:
            w.vector("cuts", np.asarray(c, dtype=np.float64))

    @classmethod
    def read(cls, r: TextReader) -> "BinTable":
        n_bins = r.scalar("bins", int)
        K = r.scalar("bin_checkpoints", int)
        return cls(tuple(r.vector("cuts") for _ in range(K)), n_bins)


def fit_bins(max_posteriors: np.ndarray, n_bins: int = DEFAULT_BINS) -> BinTable:
    """Cut points at the ``i / B`` empirical quantiles (midpoint rule) of each
    checkpoint's max posteriors, duplicates collapsed. A constant sample gets
    no cut at all, so every value lands in bin 0."""
    M = np.asarray(max_posteriors, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if n_bins < 1:
        raise FitError("need at least one bin")
    if M.shape[0] < n_bins:
        raise FitError(f"{M.shape[0]} samples per checkpoint cannot fill {n_bins} bins")
    qs = np.arange(1, n_bins) / n_bins
    cuts = []
    for k in range(M.shape[1]):
        col = M[:, k]
        if n_bins == 1:
            cuts.append(np.empty(0))
        elif col.min() == col.max():
            logger.warning("checkpoint %d: constant max posterior, all values map to bin 0", k)
            cuts.append(np.empty(0))
        else:
            cuts.append(np.unique(np.quantile(col, qs, method="midpoint")))
    return BinTable(tuple(cuts), n_bins)


# -- trigger state --------------------------------------------------------------

FEATURES = ("posteriors", "max_posterior", "margin", "predicted_class", "confidence_bin", "time")
ALERT_STAR = ("max_posterior", "margin", "predicted_class", "confidence_bin", "time")


@dataclass(frozen=True)
class TriggerState:
    max_posterior: float
    margin: float
    predicted_class_onehot: tuple
    confidence_bin: float
    normalized_time: float

    @property
    def predicted_class(self) -> int:
        return self.predicted_class_onehot.index(1)


def top_two(P: np.ndarray):
    s = np.sort(P, axis=-1)
    return s[..., -1], s[..., -1] - s[..., -2]


def state_features(posterior, t: int, T: int, bins: BinTable | None = None,
                   k: int | None = None) -> TriggerState:
    p = np.asarray(posterior, dtype=np.float64)
    mx, margin = top_two(p)
    pred = int(argmax_lowest(p))
    onehot = tuple(int(i == pred) for i in range(len(p)))
    if bins is None or k is None:
        conf = 0.0
    else:
        conf = float(bins.scaled(mx, k))
    return TriggerState(float(mx), float(margin), onehot, conf, t / T)


@dataclass(frozen=True)
class StateEncoder:
    """Turns posteriors into trigger-state feature vectors on a checkpoint grid."""

    checkpoints: np.ndarray
    length: int
    bins: BinTable | None = None

    @property
    def n_checkpoints(self) -> int:
        return len(self.checkpoints)

    def feature_dim(self, features, n_classes: int) -> int:
        sizes = {"posteriors": n_classes, "predicted_class": n_classes}
        return sum(sizes.get(f, 1) for f in features)

    def encode(self, P: np.ndarray, features=ALERT_STAR) -> np.ndarray:
        """``(n, K, C)`` posteriors to ``(n, K, d)`` state vectors in ``[0, 1]``."""
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 3 or P.shape[1] != self.n_checkpoints:
            raise DataError(f"posteriors must have shape (n, {self.n_checkpoints}, C), got {P.shape}")
        unknown = set(features) - set(FEATURES)
        if unknown:
            raise InputError(f"unknown state features: {sorted(unknown)}")
        n, K, C = P.shape
        mx, margin = top_two(P)
        blocks = []
        for f in features:
            if f == "posteriors":
                blocks.append(P)
            elif f == "max_posterior":
                blocks.append(mx[..., None])
            elif f == "margin":
                blocks.append(margin[..., None])
            elif f == "predicted_class":
                blocks.append(np.eye(C)[argmax_lowest(P)])
            elif f == "confidence_bin":
                if self.bins is None:
                    raise FitError("confidence_bin needs fitted bins")
                conf = np.stack([self.bins.scaled(mx[:, k], k) for k in range(K)], axis=1)
                blocks.append(conf[..., None].astype(np.float64))
            elif f == "time":
                tt = np.broadcast_to(self.checkpoints / self.length, (n, K))
                blocks.append(tt[..., None])
        return np.concatenate(blocks, axis=2)

    def state(self, posterior, k: int) -> TriggerState:
        return state_features(posterior, int(self.checkpoints[k]), self.length, self.bins, k)


def state_vector(state: TriggerState, posterior, features=ALERT_STAR) -> np.ndarray:
    """Feature vector of a single state, in the order used by :meth:`StateEncoder.encode`."""
    parts = []
    for f in features:
        if f == "posteriors":
            parts.extend(np.asarray(posterior, dtype=np.float64))
        elif f == "max_posterior":
            parts.append(state.max_posterior)
        elif f == "margin":
            parts.append(state.margin)
        elif f == "predicted_class":
            parts.extend(state.predicted_class_onehot)
        elif f == "confidence_bin":
            parts.append(state.confidence_bin)
        elif f == "time":
            parts.append(state.normalized_time)
        else:
            raise InputError(f"unknown state feature {f!r}")
    return np.asarray(parts, dtype=np.float64)
