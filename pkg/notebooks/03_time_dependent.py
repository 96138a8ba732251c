"""A time-conditioned energy f(x, t) trained level by level on 1-D Gaussian data.

For N(0, 1) data the diffused marginal at time t is N(0, 1 + t), so the
ideal score slope at t is -1/(1 + t). About a minute on one core.
"""

import math

import numpy as np

from dcdebm import models, objectives
from dcdebm.experiments import ExperimentConfig, run_train

cfg = ExperimentConfig().replace(**{
    "dataset.name": "gaussian", "loss.kind": "dcd_ve_time", "loss.n_levels": "8",
    "loss.sigma_min": "0.1", "loss.sigma_max": str(math.sqrt(2)), "diffusion.t_max": "2",
    "model.hidden": "32,32", "optimizer.batch_size": "1000", "optimizer.iterations": "3000",
})
rec = run_train(cfg)
grid = objectives.time_grid(cfg.schedule(), 8, 0.1, math.sqrt(2))

print(" t       learned   ideal")
for t in grid:
    x = np.linspace(-2, 2, 41)[:, None] * math.sqrt(1 + t)
    slope = np.polyfit(x[:, 0], models.score(rec.model, x, t)[:, 0], 1)[0]
    print(f"{t:6.3f}  {slope:8.4f}  {-1 / (1 + t):8.4f}")
