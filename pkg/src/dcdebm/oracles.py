"""Closed-form and brute-force checks of the divergence theory on Gaussians.

Under the VE diffusion an isotropic Gaussian N(m, a I) stays Gaussian,
N(m, (a + Sigma(t)) I), so KL divergences of evolved pairs and their score
gaps are available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from . import autodiff as ad
from . import models
from .diffusion import VeSchedule


@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("variance must be positive")
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def evolved(self, sched: VeSchedule, t) -> "GaussianSpec":
        return GaussianSpec(self.mean, self.var + float(sched.sigma2(t)))


def _kl(p: GaussianSpec, q: GaussianSpec) -> float:
    d = p.dim
    gap = float(np.sum((p.mean - q.mean) ** 2))
    return 0.5 * (d * p.var / q.var + gap / q.var - d + d * math.log(q.var / p.var))


def gaussian_kl_ve(p: GaussianSpec, q: GaussianSpec, sched: VeSchedule, t) -> float:
    """KL(p_t || q_t) for both Gaussians diffused to time t."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    return _kl(p.evolved(sched, t), q.evolved(sched, t))


def score_gap_integrand(p: GaussianSpec, q: GaussianSpec, sched: VeSchedule, t) -> np.ndarray:
    """1/2 g(t)^2 E_{p_t} ||grad log p_t - grad log q_t||^2, vectorised over t."""
    t = np.asarray(t, dtype=np.float64)
    a = p.var + sched.sigma2(t)
    b = q.var + sched.sigma2(t)
    gap = float(np.sum((p.mean - q.mean) ** 2))
    # x - m_p has covariance a I; the gap is (x - m_p)(1/b - 1/a) + (m_p - m_q)/b
    expect = p.dim * a * (1.0 / b - 1.0 / a) ** 2 + gap / b ** 2
    return 0.5 * sched.g2(t) * expect


@dataclass(frozen=True)
class DcdReport:
    kl_difference: float
    quadrature: float
    panels: int

    @property
    def rel_gap(self) -> float:
        scale = max(abs(self.kl_difference), abs(self.quadrature))
        return 0.0 if scale == 0 else abs(self.kl_difference - self.quadrature) / scale


class QuadratureError(ArithmeticError):
    pass


def dcd_gaussian(p: GaussianSpec, q: GaussianSpec, sched: VeSchedule, T: float,
                 panels: int = 1024, rtol: float = 1e-10, max_panels: int = 2 ** 20) -> DcdReport:
    """DCD over [0, T] two ways: KL(p, q) - KL(p_T, q_T), and Simpson quadrature of the score gap.

    The panel count doubles from ``panels`` until successive Simpson values
    agree to ``rtol`` (the first check compares 1024 against 2048 panels).
    """
    kl_diff = gaussian_kl_ve(p, q, sched, 0.0) - gaussian_kl_ve(p, q, sched, T)
    if T == 0:
        return DcdReport(kl_diff, 0.0, 0)

    def simpson_n(n):
        ts = np.linspace(0.0, T, n + 1)
        return float(simpson(score_gap_integrand(p, q, sched, ts), x=ts))

    n = panels
    prev = simpson_n(n)
    while True:
        n *= 2
        cur = simpson_n(n)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300) or cur == prev:
            return DcdReport(kl_diff, cur, n)
        if n >= max_panels:
            raise QuadratureError(f"no convergence with {n} panels: {prev} vs {cur}")
        prev = cur


def kl_monotone_check(p: GaussianSpec, q: GaussianSpec, sched: VeSchedule, times) -> dict:
    """Evaluate KL(p_t || q_t) on an increasing grid; report the largest increase."""
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    kls = np.array([gaussian_kl_ve(p, q, sched, t) for t in times])
    rises = np.diff(kls)
    return {"times": times, "kl": kls, "max_violation": float(max(0.0, rises.max(initial=0.0))),
            "monotone": bool(np.all(rises <= 0.0))}


# ---------------------------------------------------------------------------
# gradient checking


def _flatten(arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.empty(0)


def _unflatten(flat, like) -> list:
    out, pos = [], 0
    for a in like:
        n = np.size(a)
        out.append(flat[pos:pos + n].reshape(np.shape(a)))
        pos += n
    return out


def grad_check(loss_fn, model, x, n_params: int = 10, h: float = 1e-5, seed: int = 0,
               floor: float = 1e-6) -> dict:
    """Compare autodiff parameter gradients with central differences.

    ``loss_fn(model, x, rng)`` must return a :class:`~dcdebm.objectives.LossValue`;
    it is called with a fresh ``default_rng(seed)`` every time, so all
    evaluations share their random numbers. The relative error is
    |auto - fd| / max(|auto|, |fd|, floor).
    """
    auto = _flatten(loss_fn(model, x, np.random.default_rng(seed)).gradient())
    theta = _flatten(model.params)
    pick = np.random.default_rng(seed + 1).choice(theta.size, size=min(n_params, theta.size), replace=False)
    fd = np.empty(len(pick))
    for j, idx in enumerate(pick):
        vals = []
        for sign in (1.0, -1.0):
            th = theta.copy()
            th[idx] += sign * h
            m = model.with_params(_unflatten(th, model.params))
            vals.append(loss_fn(m, x, np.random.default_rng(seed)).value)
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    a = auto[pick]
    abs_err = np.abs(a - fd)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
    return {"indices": pick, "autodiff": a, "finite_diff": fd, "max_abs_err": float(abs_err.max()),
            "max_rel_err": float(rel.max())}


# ---------------------------------------------------------------------------
# identities


def stein_residual(model, n: int, rng: np.random.Generator) -> tuple:
    """MC mean and standard error of <s(x), grad log p(x)> + div s(x), x ~ N(0, I).

    The vector field s is the score of ``model``; its divergence is the
    model's Laplacian. Stein's identity makes the expectation zero.
    """
    x = rng.standard_normal((n, model.input_dim))
    s = models.score(model, x)
    div = models.laplacian_exact(model, x)
    vals = np.sum(s * -x, axis=1) + div
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def log_density_residual(spec: GaussianSpec, x) -> np.ndarray:
    """Per-row |lap p - (p ||grad log p||^2 + p lap log p)| for an isotropic Gaussian density p.

    lap p is taken by autodiff through exp(log p); the right-hand side uses
    autodiff derivatives of log p on a separate graph.
    """
    x = models._as_batch(x, spec.dim)
    d = spec.dim
    log_norm = -0.5 * d * math.log(2 * math.pi * spec.var)
    logp_model = models.QuadraticEbm(spec.mean, np.full(d, 1.0 / spec.var), log_norm)

    g = ad.Graph()
    xn = g.input((None, d))
    params = [g.param(p) for p in logp_model.params]
    dens = g.exp(logp_model.forward(g, xn, params))
    ds = models.score_node(g, dens, xn)
    lap_p = models.laplacian_node(g, ds, xn, d)
    lhs, p = ad.eval(g, [lap_p, dens], {xn: x})

    s = models.score(logp_model, x)
    lap_log = models.laplacian_exact(logp_model, x)
    rhs = p * np.sum(s * s, axis=1) + p * lap_log
    return np.abs(lhs - rhs)
