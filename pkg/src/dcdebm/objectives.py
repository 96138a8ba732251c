"""Training and evaluation losses for energy-based models.

Every loss is a scalar node on a :class:`~dcdebm.autodiff.Graph` and is
differentiable in the parameters; none involves the normalising constant.

Two layers are provided. The functional API (``dcd_ve_loss``, ``cd_loss``,
...) builds a fresh graph per call and returns a :class:`LossValue`. The
``*Program`` classes build the graph and its parameter gradients once per
architecture and are re-evaluated with new bindings every training step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .diffusion import VeSchedule, perturb, perturb_between, rate_node, sigma2
from .samplers import LangevinConfig, ReplayBuffer, langevin_run, pcd_negatives


def parse_laplacian_mode(mode):
    """Normalise ``"exact"``, ``"hutchinson"``, ``"hutchinson:8"`` or ``("hutchinson", 8)``."""
    if isinstance(mode, str):
        if mode == "exact":
            return "exact", 0
        if mode.startswith("hutchinson"):
            _, _, n = mode.partition(":")
            return "hutchinson", int(n) if n else 1
    elif isinstance(mode, (tuple, list)) and len(mode) == 2 and mode[0] == "hutchinson":
        if int(mode[1]) < 1:
            raise ValueError("n_probes must be >= 1")
        return "hutchinson", int(mode[1])
    raise ValueError(f"unknown Laplacian mode {mode!r}")


def draw_probes(shape, n_probes: int, rng: np.random.Generator, dist: str = "rademacher") -> list:
    if dist == "rademacher":
        return [rng.choice((-1.0, 1.0), size=shape) for _ in range(n_probes)]
    if dist == "gaussian":
        return [rng.standard_normal(shape) for _ in range(n_probes)]
    raise ValueError(f"unknown probe distribution {dist!r}")


def hutchinson_node(graph: ad.Graph, s: int, x: int, probes) -> int:
    """Mean over probes v of v . d/dx (s . v), per row."""
    total = None
    for v in probes:
        hv = ad.grad(graph, graph.sum(graph.dot(s, v)), [x])[0]
        est = graph.dot(hv, v)
        total = est if total is None else graph.add(total, est)
    return graph.scale(total, 1.0 / len(probes))


def build_laplacian(graph: ad.Graph, s: int, x: int, dim: int, mode: str, probes=()) -> int:
    if mode == "exact":
        return models.laplacian_node(graph, s, x, dim)
    return hutchinson_node(graph, s, x, probes)


def laplacian_evals(dim: int, laplacian_mode) -> int:
    """Score-evaluation count charged for one Laplacian (D exact, n_probes Hutchinson)."""
    mode, n = parse_laplacian_mode(laplacian_mode)
    return dim if mode == "exact" else n


@dataclass
class LossValue:
    """A scalar loss node, its value and named components.

    ``params`` are the parameter node ids and ``bindings`` the input values
    the loss was evaluated with, so :meth:`gradient` can differentiate it.
    """

    graph: ad.Graph
    node: int
    value: float
    components: dict = field(default_factory=dict)
    params: list = field(default_factory=list)
    bindings: dict = field(default_factory=dict)

    def gradient(self) -> list:
        nodes = ad.grad(self.graph, self.node, self.params)
        return ad.eval(self.graph, nodes, self.bindings)


def _leaf_params(graph: ad.Graph, model) -> list:
    return [graph.param(p) for p in model.params]


def _finish(graph, loss, comps: dict, params, bindings) -> LossValue:
    names = list(comps)
    vals = ad.eval(graph, [loss] + [comps[n] for n in names], bindings)
    return LossValue(graph, loss, float(vals[0]), {n: float(v) for n, v in zip(names, vals[1:])},
                     params, bindings)


# ---------------------------------------------------------------------------
# DCD-VE


def _dcd_terms(g: ad.Graph, model, x_lo: int, x_hi: int, params, c_rate, c_diff, tfeat, mode, probes):
    """term1 = c_rate * mean(||s||^2 + lap) at x_hi; term2 = c_diff * (mean f(x_hi) - mean f(x_lo))."""
    f_lo = model.forward(g, x_lo, params, tfeat)
    f_hi = model.forward(g, x_hi, params, tfeat)
    s = models.score_node(g, f_hi, x_hi)
    lap = build_laplacian(g, s, x_hi, model.input_dim, mode, probes)
    inner = g.add(g.sum(g.square(s), axes=(1,)), lap)
    term1 = g.mul(g.mean(inner), c_rate)
    term2 = g.mul(g.sub(g.mean(f_hi), g.mean(f_lo)), c_diff)
    return g.add(term1, term2), term1, term2


def dcd_ve_loss(model, x0, t: float, sched: VeSchedule, laplacian_mode="exact",
                rng: np.random.Generator | None = None, g0_sq: float | None = None,
                probe_dist: str = "rademacher") -> LossValue:
    """One-step DCD-VE loss with perturbation time ``t``.

    L = E_{x_t} 1/2 G(0)^2 [||grad f(x_t)||^2 + lap f(x_t)] + (E f(x_t) - E f(x_0)) / t,
    where x_t is each row of ``x0`` perturbed by the VE kernel. ``g0_sq``
    defaults to g(0)^2 of the schedule.
    """
    if t <= 0:
        raise ValueError("perturbation time t must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    mode, n_probes = parse_laplacian_mode(laplacian_mode)
    x0 = models._as_batch(x0, model.input_dim)
    xt = perturb(x0, t, sched, rng)
    g2 = float(sched.g2(0.0)) if g0_sq is None else float(g0_sq)
    g = ad.Graph()
    x_lo, x_hi = g.input((None, model.input_dim), "x0"), g.input((None, model.input_dim), "xt")
    probes = [g.input((None, model.input_dim)) for _ in range(n_probes)]
    params = _leaf_params(g, model)
    loss, term1, term2 = _dcd_terms(g, model, x_lo, x_hi, params, g.constant(0.5 * g2),
                                    g.constant(1.0 / t), None, mode, probes)
    b = {x_lo: x0, x_hi: xt}
    b.update(zip(probes, draw_probes(x0.shape, n_probes, rng, probe_dist)))
    return _finish(g, loss, {"term1": term1, "term2": term2}, params, b)


def time_grid(sched: VeSchedule, n_levels: int, sigma_min: float = 0.01, sigma_max: float = 80.0) -> np.ndarray:
    """Diffusion times whose noise std sqrt(Sigma(t)) is geometric in [sigma_min, sigma_max]."""
    if n_levels < 1:
        raise ValueError("need at least one level")
    sig = np.geomspace(sigma_min, sigma_max, n_levels) if n_levels > 1 else np.array([sigma_max])
    var = sig ** 2
    if sched.kind == "const":
        times = var / sched.g0 ** 2
    else:
        times = np.cbrt(3.0 * var)
    if times[-1] > sched.t_max * (1 + 1e-12):
        raise ValueError(f"grid end {times[-1]:.4g} exceeds schedule t_max={sched.t_max}")
    return times


def level_constants(sched: VeSchedule, grid, i: int):
    """(t_prev, t_i, 1/2 G^2, 1/delta) for level ``i`` (0-based).

    The G^2 factor is the average of g^2 over the step, i.e.
    (Sigma(t_i) - Sigma(t_prev)) / delta; for constant g it equals g^2.
    """
    t_prev = 0.0 if i == 0 else float(grid[i - 1])
    t_i = float(grid[i])
    delta = t_i - t_prev
    g2 = (sigma2(sched, t_i) - sigma2(sched, t_prev)) / delta
    return t_prev, t_i, 0.5 * g2, 1.0 / delta


def dcd_ve_time_loss(model: models.TimeEbm, x0, sched: VeSchedule, rng: np.random.Generator,
                     grid, laplacian_mode="exact", level: int | None = None,
                     probe_dist: str = "rademacher") -> LossValue:
    """DCD-VE on a randomly chosen slice f(., t_i) of a time-conditioned energy.

    The base sample is the diffused data at the previous level t_{i-1}
    (t_0 = 0) and the perturbed sample is at t_i, so delta_i = t_i - t_{i-1}
    and the slice at t_i is fitted to the time-t_i marginal.
    """
    grid = np.asarray(grid, dtype=np.float64)
    i = int(rng.integers(len(grid))) if level is None else int(level)
    t_prev, t_i, c_rate, c_diff = level_constants(sched, grid, i)
    mode, n_probes = parse_laplacian_mode(laplacian_mode)
    x0 = models._as_batch(x0, model.input_dim)
    x_lo = perturb(x0, t_prev, sched, rng)
    x_hi = perturb_between(x_lo, t_prev, t_i, sched, rng)
    g = ad.Graph()
    n_lo, n_hi = g.input((None, model.input_dim)), g.input((None, model.input_dim))
    tf = g.input((None, model.feature_dim))
    probes = [g.input((None, model.input_dim)) for _ in range(n_probes)]
    params = _leaf_params(g, model)
    loss, term1, term2 = _dcd_terms(g, model, n_lo, n_hi, params, g.constant(c_rate),
                                    g.constant(c_diff), tf, mode, probes)
    b = {n_lo: x_lo, n_hi: x_hi, tf: model.features(t_i, len(x0))}
    b.update(zip(probes, draw_probes(x0.shape, n_probes, rng, probe_dist)))
    lv = _finish(g, loss, {"term1": term1, "term2": term2}, params, b)
    lv.components["level"] = i
    lv.components["t"] = t_i
    return lv


# ---------------------------------------------------------------------------
# contrastive divergence


def contrast_loss(model, x_pos, x_neg, t=None) -> LossValue:
    """mean f(x_neg) - mean f(x_pos) with both batches held constant."""
    x_pos = models._as_batch(x_pos, model.input_dim)
    x_neg = models._as_batch(x_neg, model.input_dim)
    g = ad.Graph()
    d = model.input_dim
    pos, neg = g.input((None, d), "pos"), g.input((None, d), "neg")
    params = _leaf_params(g, model)
    tf = None
    b = {pos: x_pos, neg: x_neg}
    if isinstance(model, models.TimeEbm):
        tf = g.input((None, model.feature_dim))
        b[tf] = model.features(t, len(x_pos))
    e_pos = g.mean(model.forward(g, pos, params, tf))
    e_neg = g.mean(model.forward(g, neg, params, tf))
    loss = g.sub(e_neg, e_pos)
    return _finish(g, loss, {"pos_energy": e_pos, "neg_energy": e_neg}, params, b)


def cd_loss(model, x0, cfg: LangevinConfig, rng: np.random.Generator) -> LossValue:
    """mean f(negatives) - mean f(data), negatives from data-initialised Langevin.

    The negatives enter the graph as bound inputs, so no gradient flows
    through the chain. Raises :class:`~dcdebm.samplers.ChainDivergedError`
    when the chain blows up.
    """
    x0 = models._as_batch(x0, model.input_dim)
    neg = langevin_run(model, x0, cfg, rng)
    return contrast_loss(model, x0, neg)


def pcd_loss(model, x0, buffer: ReplayBuffer, cfg: LangevinConfig, rng: np.random.Generator):
    """Like :func:`cd_loss` with negatives from persistent chains; returns (loss, buffer)."""
    x0 = models._as_batch(x0, model.input_dim)
    neg, buffer = pcd_negatives(model, buffer, len(x0), cfg, rng)
    return contrast_loss(model, x0, neg), buffer


# ---------------------------------------------------------------------------
# score matching metric and Laplacian estimators


def sm_loss_value(model, x, laplacian_mode="exact", rng=None, probe_dist: str = "rademacher") -> LossValue:
    """Score-matching objective mean(1/2 ||grad f||^2 + lap f) as a differentiable loss."""
    mode, n_probes = parse_laplacian_mode(laplacian_mode)
    x = models._as_batch(x, model.input_dim)
    g = ad.Graph()
    xn = g.input((None, model.input_dim), "x")
    probes = [g.input((None, model.input_dim)) for _ in range(n_probes)]
    params = _leaf_params(g, model)
    s = models.score_node(g, model.forward(g, xn, params), xn)
    lap = build_laplacian(g, s, xn, model.input_dim, mode, probes)
    half_sq = g.scale(g.sum(g.square(s), axes=(1,)), 0.5)
    loss = g.mean(g.add(half_sq, lap))
    b = {xn: x}
    if probes:
        rng = rng if rng is not None else np.random.default_rng()
        b.update(zip(probes, draw_probes(x.shape, n_probes, rng, probe_dist)))
    return _finish(g, loss, {"half_sq_score": g.mean(half_sq), "laplacian": g.mean(lap)}, params, b)


def sm_rows(model, x, laplacian_mode="exact", rng=None, probe_dist: str = "rademacher",
            chunk: int = 4096, t=None) -> np.ndarray:
    """Per-row 1/2 ||grad f||^2 + lap f, evaluated in chunks."""
    mode, n_probes = parse_laplacian_mode(laplacian_mode)
    x = models._as_batch(x, model.input_dim)
    prog = models.program(model)
    out = []
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        b = prog.bindings(model, xb, t)
        if mode == "exact":
            s, lap = ad.eval(prog.graph, [prog.s, prog.lap], b)
        else:
            s = ad.eval(prog.graph, prog.s, b)
            lap = hutchinson_laplacian(model, xb, n_probes, probe_dist, rng, t)
        out.append(0.5 * np.sum(s * s, axis=1) + lap)
    return np.concatenate(out) if out else np.empty(0)


def sm_eval_loss(model, x, laplacian_mode="exact", rng=None, probe_dist: str = "rademacher") -> float:
    """Monte-Carlo score-matching metric over the rows of ``x``; lower is better."""
    return float(np.mean(sm_rows(model, x, laplacian_mode, rng, probe_dist)))


def hutchinson_laplacian(model, x, n_probes: int = 1, probe_dist: str = "rademacher",
                         rng: np.random.Generator | None = None, t=None) -> np.ndarray:
    """Unbiased per-row Laplacian estimate from ``n_probes`` random quadratic forms."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    prog = _HutchProgram.get(model, n_probes)
    x = models._as_batch(x, model.input_dim)
    b = prog.base.bindings(model, x, t)
    b.update(zip(prog.probes, draw_probes(x.shape, n_probes, rng, probe_dist)))
    return ad.eval(prog.base.graph, prog.node, b)


class _HutchProgram:
    _cache: dict = {}

    def __init__(self, model, n_probes):
        base = models.EnergyProgram(model)
        g = base.graph
        self.base = base
        self.probes = [g.input((None, model.input_dim)) for _ in range(n_probes)]
        self.node = hutchinson_node(g, base.s, base.x, self.probes)

    @classmethod
    def get(cls, model, n_probes):
        key = (model.arch, n_probes)
        if key not in cls._cache:
            cls._cache[key] = cls(model, n_probes)
        return cls._cache[key]


# ---------------------------------------------------------------------------
# compiled training programs


class DcdProgram:
    """DCD-VE loss and its parameter gradients for one architecture.

    Serves both the plain one-step loss and the time-conditioned variant:
    the rate factor 1/2 G^2 and the inverse perturbation time are scalar
    inputs.
    """

    def __init__(self, model, laplacian_mode="exact"):
        self.mode, self.n_probes = parse_laplacian_mode(laplacian_mode)
        g = ad.Graph()
        d = model.input_dim
        self.graph = g
        self.x_lo, self.x_hi = g.input((None, d), "x_lo"), g.input((None, d), "x_hi")
        self.params = [g.input(s) for s in model.param_shapes]
        self.tfeat = g.input((None, model.feature_dim)) if isinstance(model, models.TimeEbm) else None
        self.c_rate, self.c_diff = g.input(()), g.input(())
        self.probes = [g.input((None, d)) for _ in range(self.n_probes)]
        self.loss, self.term1, self.term2 = _dcd_terms(
            g, model, self.x_lo, self.x_hi, self.params, self.c_rate, self.c_diff,
            self.tfeat, self.mode, self.probes)
        self.grads = ad.grad(g, self.loss, self.params)

    def run(self, model, x_lo, x_hi, c_rate, c_diff, rng, probe_dist="rademacher", tfeat=None):
        """Return ``(loss, term1, term2, grads)``."""
        b = {self.x_lo: x_lo, self.x_hi: x_hi, self.c_rate: c_rate, self.c_diff: c_diff}
        b.update(zip(self.params, model.params))
        if self.tfeat is not None:
            b[self.tfeat] = tfeat
        b.update(zip(self.probes, draw_probes(x_lo.shape, self.n_probes, rng, probe_dist)))
        out = ad.eval(self.graph, [self.loss, self.term1, self.term2] + self.grads, b)
        return float(out[0]), float(out[1]), float(out[2]), out[3:]


class ContrastProgram:
    """mean f(neg) - mean f(pos) and its parameter gradients."""

    def __init__(self, model):
        g = ad.Graph()
        d = model.input_dim
        self.graph = g
        self.pos, self.neg = g.input((None, d)), g.input((None, d))
        self.params = [g.input(s) for s in model.param_shapes]
        self.loss = g.sub(g.mean(model.forward(g, self.neg, self.params)),
                          g.mean(model.forward(g, self.pos, self.params)))
        self.grads = ad.grad(g, self.loss, self.params)

    def run(self, model, pos, neg):
        b = {self.pos: pos, self.neg: neg}
        b.update(zip(self.params, model.params))
        out = ad.eval(self.graph, [self.loss] + self.grads, b)
        return float(out[0]), out[1:]
