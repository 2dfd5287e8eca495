"""
Earliness against accuracy over the cost weight
================================================

Sweep alpha from 0 to 1 and watch the learned trigger move from
triggering at once to waiting for a confident prediction.
"""

# %%
import numpy as np

from alert_ects.bench import alpha_sweep, pareto_rows, prepare_dataset
from alert_ects.rl import TrainConfig
from alert_ects.synthetic import make_synthetic

prep = prepare_dataset(make_synthetic(n_series=300, signal_checkpoint=8, noise=0.8, seed=1))

# %%
# One cell per alpha; each cell trains its own policy.
alphas = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
runs = alpha_sweep([prep], ["alert_star", "proba_threshold"], alphas,
                   TrainConfig(learning_rate=1e-3, max_epochs=200), seed=0)

for r in runs:
    print(f"{r.method:16s} alpha={r.alpha:.1f}  AvgCost={r.avg_cost:7.3f}  "
          f"delay={r.report.avg_delay_cost:6.2f}  misclassification={r.report.avg_misclassification_cost:6.2f}  "
          f"gap to oracle={r.relative_gap:6.2f}")

# %%
# Non-dominated (delay, misclassification) pairs across alphas.
for row in pareto_rows(runs):
    if row["on_front"]:
        print(row["method"], row["alpha"], np.round([row["mean_delay_cost"],
                                                     row["mean_misclassification_cost"]], 3))
