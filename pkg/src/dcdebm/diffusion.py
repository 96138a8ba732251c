"""Variance-exploding forward diffusion dx = g(t) dw.

The marginal kernel is p(x_t | x_0) = N(x_0, Sigma(t) I) with
Sigma(t) = int_0^t g(s)^2 ds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models


@dataclass(frozen=True)
class VeSchedule:
    """``kind='const'``: g(t) = g0, Sigma = g0^2 t.  ``kind='linear'``: g(t) = t, Sigma = t^3/3."""

    kind: str = "const"
    g0: float = 1.0
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("const", "linear"):
            raise ValueError(f"unknown diffusion kind {self.kind!r}; expected 'const' or 'linear'")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.kind == "const" and self.g0 <= 0:
            raise ValueError("g0 must be positive")

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.t_max * (1 + 1e-12)):
            raise ValueError(f"t={t} outside [0, {self.t_max}]")
        return t

    def g(self, t):
        t = self._check(t)
        return np.full_like(t, self.g0) if self.kind == "const" else t

    def g2(self, t):
        return self.g(t) ** 2

    def sigma2(self, t):
        t = self._check(t)
        if self.kind == "const":
            return self.g0 ** 2 * t
        return t ** 3 / 3.0

    @classmethod
    def from_config(cls, section: dict) -> "VeSchedule":
        return cls(kind=section.get("kind", "const"), g0=float(section.get("g0", 1.0)),
                   t_max=float(section.get("t_max", 1.0)))


def sigma2(sched: VeSchedule, t) -> float:
    """Accumulated variance Sigma(t)."""
    return float(sched.sigma2(t))


def perturb(x0, t, sched: VeSchedule, rng: np.random.Generator) -> np.ndarray:
    """Sample x_t ~ N(x0, Sigma(t) I) row-wise; t = 0 returns x0 unchanged."""
    x0 = np.asarray(x0, dtype=np.float64)
    var = sigma2(sched, t)
    if var == 0.0:
        return x0.copy()
    return x0 + np.sqrt(var) * rng.standard_normal(x0.shape)


def perturb_between(xs, s, t, sched: VeSchedule, rng: np.random.Generator) -> np.ndarray:
    """Move a sample of the time-s marginal to time t > s by adding the variance increment."""
    if t < s:
        raise ValueError("diffusion runs forward only")
    inc = sigma2(sched, t) - sigma2(sched, s)
    xs = np.asarray(xs, dtype=np.float64)
    return xs + np.sqrt(inc) * rng.standard_normal(xs.shape)


def rate_node(graph: ad.Graph, s: int, lap: int, g2: float) -> int:
    """1/2 g^2 (||s||^2 + lap) per row, from score and Laplacian nodes."""
    sq = graph.sum(graph.square(s), axes=(1,))
    return graph.scale(graph.add(sq, lap), 0.5 * g2)


def energy_evolution_rate(model, x, sched: VeSchedule, t, laplacian_mode="exact", rng=None) -> np.ndarray:
    """df/dt of the energy under the VE diffusion at time t, per row of ``x``.

    ``laplacian_mode`` is ``"exact"`` or ``("hutchinson", n_probes)``.
    """
    from .objectives import build_laplacian, parse_laplacian_mode

    mode, n_probes = parse_laplacian_mode(laplacian_mode)
    x = models._as_batch(x, model.input_dim)
    g = ad.Graph()
    xn = g.input((None, model.input_dim))
    params = [g.param(p) for p in model.params]
    f = model.forward(g, xn, params)
    s = models.score_node(g, f, xn)
    probes = []
    if mode == "hutchinson":
        rng = rng if rng is not None else np.random.default_rng()
        probes = [g.input((None, model.input_dim)) for _ in range(n_probes)]
    lap = build_laplacian(g, s, xn, model.input_dim, mode, probes)
    rate = rate_node(g, s, lap, float(sched.g2(t)))
    b = {xn: x}
    for p in probes:
        b[p] = rng.choice([-1.0, 1.0], size=x.shape)
    return ad.eval(g, rate, b)
