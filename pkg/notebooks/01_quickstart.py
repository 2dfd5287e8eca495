"""
Quickstart: classifier chain, baselines and one learned trigger
===============================================================

Generate a synthetic two-class problem, fit the prefix classifier chain,
then compare the hindsight oracle, the four hand-designed triggers and
ALERT at a single cost weight.
"""

# %%
# Data and posteriors. The class signal starts at checkpoint 10 of 20.
import numpy as np

from alert_ects.bench import evaluate_cell, fit_method, prepare_dataset
from alert_ects.rl import TrainConfig
from alert_ects.synthetic import make_synthetic
from alert_ects.triggers import BASELINES

data = make_synthetic(n_series=300, signal_checkpoint=10, noise=1.0, seed=0)
prep = prepare_dataset(data)
print(data.X.shape, "series x length;", len(data.checkpoints), "checkpoints")

acc = (prep.test_P.argmax(axis=2) == prep.test_y[:, None]).mean(axis=0)
print("test accuracy per checkpoint:", np.round(acc, 2))

# %%
# Costs at alpha = 0.7: misclassification weighs 0.7, delay 0.3.
costs = prep.costs(0.7)

# %%
# Every method is refit for this alpha and scored on the test partition.
methods = ["alert_star", *sorted(BASELINES)]
config = TrainConfig(learning_rate=1e-3, max_epochs=200)
for m in methods:
    run = evaluate_cell(fit_method(m, prep, costs, config), prep, m, costs)
    print(f"{m:16s} AvgCost={run.avg_cost:7.3f}  oracle={run.oracle_avg_cost:.3f}  "
          f"mean trigger t={run.report.mean_trigger_time:5.1f}  accuracy={run.report.accuracy:.2f}")
