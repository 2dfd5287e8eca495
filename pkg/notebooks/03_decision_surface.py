"""
Decision surface of a learned trigger
=====================================

Train ALERT on a single feature pair (max posterior, time) and print its
wait/trigger choice over a grid. Triggering is shown as ``#``.
"""

# %%
import numpy as np

from alert_ects.bench import fit_method, prepare_dataset
from alert_ects.rl import TrainConfig, decision_surface
from alert_ects.synthetic import make_synthetic

prep = prepare_dataset(make_synthetic(n_series=300, signal_checkpoint=10, noise=1.0, seed=2))

# %%
# A custom feature set: the max posterior and the elapsed time.
for alpha in (0.3, 0.8):
    policy = fit_method("alert:max_posterior+time", prep, prep.costs(alpha), TrainConfig(learning_rate=1e-3, max_epochs=200))
    probs, times, grid = decision_surface(policy, prep.encoder, n_time=20, n_prob=11)
    print(f"alpha={alpha}  rows: max posterior (high to low), columns: t/T from "
          f"{times[0]:.2f} to {times[-1]:.2f}")
    for p, row in zip(probs[::-1], grid[::-1]):
        print(f"  {p:4.2f} " + "".join("#" if v else "." for v in row))
    print("  trigger share:", np.round(grid.mean(), 2))
