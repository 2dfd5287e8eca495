"""Bundled synthetic generator: class information appears at a chosen checkpoint."""

from __future__ import annotations

import numpy as np

from .core import InputError, SeriesDataset, default_checkpoints


def make_synthetic(n_series: int = 400, length: int = 100, signal_checkpoint: int = 10,
                   noise: float = 1.0, amplitude: float = 1.5, n_classes: int = 2,
                   class_weights=None, n_checkpoints: int = 20, seed: int = 0,
                   name: str | None = None) -> SeriesDataset:
    """Gaussian-noise series whose class-dependent level shift starts right after
    checkpoint ``signal_checkpoint - 1`` (1-based), so prefixes ending before
    checkpoint ``signal_checkpoint`` carry no class information.

    Class ``c`` is shifted by ``amplitude * (2c / (n_classes - 1) - 1)``.
    """
    if n_classes < 2:
        raise InputError("need at least two classes")
    cps = default_checkpoints(length, n_checkpoints)
    if not 1 <= signal_checkpoint <= len(cps):
        raise InputError(f"signal_checkpoint must be in [1, {len(cps)}]")
    rng = np.random.default_rng(seed)
    w = np.full(n_classes, 1.0 / n_classes) if class_weights is None else np.asarray(class_weights, float)
    w = w / w.sum()
    # exact class counts, then shuffled
    counts = np.floor(w * n_series).astype(int)
    counts[: n_series - counts.sum()] += 1
    y = rng.permutation(np.repeat(np.arange(n_classes), counts))
    onset = 0 if signal_checkpoint == 1 else int(cps[signal_checkpoint - 2])
    levels = amplitude * (2.0 * np.arange(n_classes) / (n_classes - 1) - 1.0)
    X = noise * rng.standard_normal((n_series, length))
    X[:, onset:] += levels[y][:, None]
    label = name or f"synthetic_k{signal_checkpoint}_s{noise:g}"
    return SeriesDataset(X, y, tuple(range(n_classes)), cps, label)
