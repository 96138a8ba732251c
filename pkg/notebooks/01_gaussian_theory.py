"""Checking the divergence theory on Gaussians, where everything is closed form.

Run with ``python3 notebooks/01_gaussian_theory.py``.
"""

import numpy as np

from dcdebm import models, oracles
from dcdebm.diffusion import VeSchedule

sched = VeSchedule("const", 1.0, 2.0)
p = oracles.GaussianSpec(0.0, 1.0)
q = oracles.GaussianSpec(0.0, 2.0)

# Diffusing both densities shrinks their KL divergence
for t in (0.0, 0.5, 1.0, 2.0):
    print(f"KL(p_t || q_t) at t={t}: {oracles.gaussian_kl_ve(p, q, sched, t):.6f}")

# The drop in KL over [0, T] equals the integrated score gap
rep = oracles.dcd_gaussian(p, q, sched, 1.0)
print(f"\nDCD over [0, 1]: KL difference {rep.kl_difference:.8f}, quadrature {rep.quadrature:.8f} "
      f"({rep.panels} panels)")

# Random pairs: always non-negative, both routes agree
rng = np.random.default_rng(0)
gaps = []
for _ in range(20):
    a = oracles.GaussianSpec(rng.normal(size=2), rng.uniform(0.2, 3))
    b = oracles.GaussianSpec(rng.normal(size=2), rng.uniform(0.2, 3))
    r = oracles.dcd_gaussian(a, b, sched, rng.uniform(0.1, 2))
    assert r.kl_difference > 0
    gaps.append(r.rel_gap)
print(f"worst relative gap over 20 random pairs: {max(gaps):.2e}")

# Stein's identity holds for the score field of any smooth model
m = models.init_params((2, 32, 32, 1), seed=1)
mean, se = oracles.stein_residual(m, 50000, rng)
print(f"\nStein residual {mean:.2e} (standard error {se:.2e})")
