"""Config-driven training, evaluation, denoising and density-grid export.

A config is an INI file with one section per concern (``dataset``,
``model``, ``loss``, ``diffusion``, ``sampler``, ``optimizer``, ``eval``,
``run``); keys are addressed as ``section.key`` in overrides.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datasets, models, objectives
from .diffusion import VeSchedule, perturb, perturb_between
from .samplers import ChainDivergedError, LangevinConfig, ReplayBuffer, denoise, langevin_run, pcd_negatives

log = logging.getLogger(__name__)


@dataclass
class DatasetSpec:
    name: str = "moons"
    path: str = ""
    labels_path: str = ""
    limit: int = 0
    sigma_pre: float = 0.3
    holdout: int = 0


@dataclass
class ModelSpec:
    hidden: tuple = (300, 300, 300)
    activation: str = "gelu"
    time_feature: str = "scalar"
    n_freq: int = 4


@dataclass
class LossSpec:
    kind: str = "dcd_ve"
    t: float = 0.0005
    g0_sq: float = 1.0
    laplacian: str = "exact"
    n_probes: int = 1
    probe_dist: str = "rademacher"
    n_levels: int = 18
    sigma_min: float = 0.01
    sigma_max: float = 80.0


@dataclass
class DiffusionSpec:
    kind: str = "const"
    g0: float = 1.0
    t_max: float = 1.0


@dataclass
class SamplerSpec:
    step_size: float = 0.001
    n_steps: int = 10
    pcd_steps: int = 20
    buffer_capacity: int = 10000
    reinit_fraction: float = 0.05


@dataclass
class OptimizerSpec:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 1000
    iterations: int = 5000


@dataclass
class EvalSpec:
    n_eval: int = 10000
    every: int = 0
    laplacian: str = "exact"
    sigmas: tuple = (0.3, 0.6, 0.9)
    denoise_step: float = 0.18
    denoise_steps: int = 1


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    diffusion: DiffusionSpec = field(default_factory=DiffusionSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    out_dir: str = ""

    SECTIONS = ("dataset", "model", "loss", "diffusion", "sampler", "optimizer", "eval")

    def schedule(self) -> VeSchedule:
        d = self.diffusion
        return VeSchedule(d.kind, d.g0, d.t_max)

    def langevin(self) -> LangevinConfig:
        steps = self.sampler.pcd_steps if self.loss.kind == "pcd" else self.sampler.n_steps
        return LangevinConfig(self.sampler.step_size, steps)

    def laplacian_mode(self):
        if self.loss.laplacian == "exact":
            return "exact"
        return ("hutchinson", self.loss.n_probes)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section.key`` (dots or double underscores) overrides applied."""
        cfg = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s)) for s in self.SECTIONS})
        for key, value in overrides.items():
            cfg.set(key.replace("__", "."), value)
        return cfg

    def set(self, dotted: str, value):
        section, _, key = dotted.partition(".")
        if not key:
            if section not in ("seed", "out_dir"):
                raise KeyError(f"unknown config key {dotted!r}")
            setattr(self, section, int(value) if section == "seed" else str(value))
            return
        if section not in self.SECTIONS:
            raise KeyError(f"unknown config section {section!r}")
        spec = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(spec)}
        if key not in fields:
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(spec, key, _coerce(value, getattr(spec, key)))

    @classmethod
    def from_ini(cls, path, overrides=()) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path):
            raise FileNotFoundError(path)
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(key if section == "run" else f"{section}.{key}", value)
        for item in overrides:
            key, _, value = item.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    def to_ini(self, path) -> Path:
        parser = configparser.ConfigParser()
        for section in self.SECTIONS:
            parser[section] = {k: _format(v) for k, v in dataclasses.asdict(getattr(self, section)).items()}
        parser["run"] = {"seed": str(self.seed), "out_dir": self.out_dir}
        path = Path(path)
        with open(path, "w") as fh:
            parser.write(fh)
        return path

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(value, current):
    if not isinstance(value, str):
        return tuple(value) if isinstance(current, tuple) else type(current)(value)
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, tuple):
        kind = type(current[0]) if current else float
        return tuple(kind(v) for v in value.split(",") if v.strip())
    return type(current)(value)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads) -> list:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


# ---------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    final_sm_loss: float = math.nan
    diverged: bool = False
    diverged_at: int | None = None
    checkpoint: str | None = None
    score_evals_per_iter: int = 0
    model: object = None
    config: ExperimentConfig | None = None

    CSV_FIELDS = ("iter", "loss", "sm_loss", "wall_ms", "n_score_evals")

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows if r["iter"] > 0])

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k, "") for k in self.CSV_FIELDS})
        summary = {
            "final_sm_loss": _json_float(self.final_sm_loss),
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "checkpoint": self.checkpoint,
            "score_evals_per_iter": self.score_evals_per_iter,
            "iterations": max((r["iter"] for r in self.rows), default=0),
            "mean_wall_ms": float(np.mean([r["wall_ms"] for r in self.rows if r["iter"] > 0]))
            if len(self.rows) > 1 else 0.0,
            "config": self.config.to_dict() if self.config else None,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
        return out


def _json_float(x):
    if x is None:
        return None
    return x if math.isfinite(x) else ("+inf" if x > 0 else ("-inf" if x < 0 else "nan"))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def read_metrics(path) -> list:
    with open(path) as fh:
        return [{k: float(v) if v not in ("", None) else math.nan for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# data


class DataSource:
    """Training batches and a fixed evaluation set for a dataset spec."""

    def __init__(self, spec: DatasetSpec, seed: int):
        self.spec = spec
        self.images = None
        if spec.name == "idx":
            if not spec.path:
                raise ValueError("dataset.path is required for idx data")
            imgs = datasets.load_idx(spec.path, spec.labels_path or None, preprocess=False,
                                     limit=spec.limit or None)
            if spec.holdout >= len(imgs.images):
                raise ValueError("dataset.holdout leaves no training images")
            # the first ``holdout`` images are reserved for evaluation
            self.eval_images = imgs.images[:spec.holdout] if spec.holdout else imgs.images
            self.images = imgs.images[spec.holdout:]
            self.dim = self.images.shape[1]
        elif spec.name in datasets.DATASETS_2D or spec.name.startswith("gaussian"):
            self.dim = self._gaussian_dim() if spec.name.startswith("gaussian") else 2
        else:
            raise ValueError(f"unknown dataset {spec.name!r}")
        self.seed = seed

    def _gaussian_dim(self) -> int:
        # "gaussian" or "gaussianD": standard normal data in D dimensions
        tail = self.spec.name[len("gaussian"):]
        return int(tail) if tail else 1

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.images is not None:
            idx = rng.integers(0, len(self.images), n)
            x = self.images[idx]
            if self.spec.sigma_pre > 0:
                x = x + self.spec.sigma_pre * rng.standard_normal(x.shape)
            return x
        if self.spec.name.startswith("gaussian"):
            return rng.standard_normal((n, self.dim))
        return datasets.sample_2d(self.spec.name, n, rng)

    def eval_set(self, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 7919])
        if self.images is not None:
            return self.eval_images[:n]
        return self.sample(n, rng)


# ---------------------------------------------------------------------------
# training


def build_model(config: ExperimentConfig, dim: int):
    m = config.model
    if config.loss.kind == "dcd_ve_time":
        return models.init_time_ebm(dim, m.hidden, seed=config.seed, activation=m.activation,
                                    time_feature=m.time_feature, n_freq=m.n_freq,
                                    t_max=config.diffusion.t_max)
    return models.init_params((dim, *m.hidden, 1), seed=config.seed, activation=m.activation)


def evaluate_sm(model, x, config: ExperimentConfig, grid=None) -> float:
    """SM metric; for time models, averaged over levels on diffused eval data."""
    mode = "exact" if config.eval.laplacian == "exact" else ("hutchinson", config.loss.n_probes)
    if mode == "exact" and model.input_dim > models.MAX_EXACT_DIM:
        # image-sized inputs: the exact Laplacian would cost D backward passes
        mode = ("hutchinson", max(1, config.loss.n_probes))
    rng = np.random.default_rng([config.seed, 104729])
    try:
        if isinstance(model, models.TimeEbm):
            sched = config.schedule()
            vals = [np.mean(objectives.sm_rows(model, perturb(x, t, sched, rng), mode, rng, t=t)) for t in grid]
            return float(np.mean(vals))
        return objectives.sm_eval_loss(model, x, mode, rng)
    except ad.NonFiniteError:
        return math.inf


def score_evals_per_iter(config: ExperimentConfig, dim: int) -> int:
    """Score evaluations charged per training step (the budget being compared)."""
    if config.loss.kind in ("cd", "pcd"):
        return config.langevin().n_steps
    return 1 + objectives.laplacian_evals(dim, config.laplacian_mode())


def run_train(config: ExperimentConfig, model=None, progress: bool = False) -> RunRecord:
    """Train with Adam under ``config``; divergence is recorded, not raised."""
    rng = np.random.default_rng(config.seed)
    data = DataSource(config.dataset, config.seed)
    model = model if model is not None else build_model(config, data.dim)
    sched = config.schedule()
    kind = config.loss.kind
    opt_spec = config.optimizer
    opt = Adam([np.shape(p) for p in model.params], opt_spec.lr, opt_spec.beta1, opt_spec.beta2, opt_spec.eps)
    x_eval = data.eval_set(config.eval.n_eval)
    grid = None
    if kind == "dcd_ve_time":
        grid = objectives.time_grid(sched, config.loss.n_levels, config.loss.sigma_min, config.loss.sigma_max)
    if kind in ("dcd_ve", "dcd_ve_time"):
        prog = objectives.DcdProgram(model, config.laplacian_mode())
    elif kind in ("cd", "pcd"):
        prog = objectives.ContrastProgram(model)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    lcfg = config.langevin()
    buffer = None
    if kind == "pcd":
        box = data.sample(10000, np.random.default_rng([config.seed, 31]))
        buffer = ReplayBuffer.from_data(box, config.sampler.buffer_capacity, config.sampler.reinit_fraction)

    n_evals = score_evals_per_iter(config, data.dim)
    record = RunRecord(score_evals_per_iter=n_evals, config=config)
    record.rows.append({"iter": 0, "loss": math.nan, "sm_loss": evaluate_sm(model, x_eval, config, grid),
                        "wall_ms": 0.0, "n_score_evals": 0})
    t_dcd = config.loss.t
    for it in range(1, opt_spec.iterations + 1):
        start = time.perf_counter()
        x0 = data.sample(opt_spec.batch_size, rng)
        try:
            if kind == "dcd_ve":
                xt = perturb(x0, t_dcd, sched, rng)
                loss, _, _, grads = prog.run(model, x0, xt, 0.5 * config.loss.g0_sq, 1.0 / t_dcd, rng,
                                             config.loss.probe_dist)
            elif kind == "dcd_ve_time":
                i = int(rng.integers(len(grid)))
                t_prev, t_i, c_rate, c_diff = objectives.level_constants(sched, grid, i)
                x_lo = perturb(x0, t_prev, sched, rng)
                x_hi = perturb_between(x_lo, t_prev, t_i, sched, rng)
                loss, _, _, grads = prog.run(model, x_lo, x_hi, c_rate, c_diff, rng, config.loss.probe_dist,
                                             model.features(t_i, len(x0)))
            elif kind == "cd":
                neg = langevin_run(model, x0, lcfg, rng)
                loss, grads = prog.run(model, x0, neg)
            else:
                neg, buffer = pcd_negatives(model, buffer, len(x0), lcfg, rng)
                loss, grads = prog.run(model, x0, neg)
            if not (math.isfinite(loss) and all(np.isfinite(g).all() for g in grads)):
                raise ad.NonFiniteError(-1, "loss")
            model = model.with_params(opt.step(model.params, grads))
            if not all(np.isfinite(p).all() for p in model.params):
                raise ad.NonFiniteError(-1, "update")
        except (ChainDivergedError, ad.NonFiniteError) as exc:
            log.info("run diverged at iteration %d: %s", it, exc)
            record.diverged, record.diverged_at = True, it
            record.rows.append({"iter": it, "loss": math.inf, "sm_loss": math.inf,
                                "wall_ms": 1e3 * (time.perf_counter() - start), "n_score_evals": n_evals})
            break
        wall = 1e3 * (time.perf_counter() - start)
        row = {"iter": it, "loss": loss, "sm_loss": math.nan, "wall_ms": wall, "n_score_evals": n_evals}
        if config.eval.every and it % config.eval.every == 0 and it != opt_spec.iterations:
            row["sm_loss"] = evaluate_sm(model, x_eval, config, grid)
        record.rows.append(row)
        if progress and it % max(1, opt_spec.iterations // 20) == 0:
            log.info("iter %d loss %.5g", it, loss)

    if record.diverged:
        record.final_sm_loss = math.inf
    else:
        record.final_sm_loss = evaluate_sm(model, x_eval, config, grid)
        if opt_spec.iterations > 0:
            record.rows[-1]["sm_loss"] = record.final_sm_loss
        if not math.isfinite(record.final_sm_loss):
            record.diverged, record.diverged_at = True, opt_spec.iterations
            record.final_sm_loss = math.inf
    record.model = model
    if config.out_dir:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.checkpoint = str(models.save_checkpoint(model, out / "model.ckpt"))
        config.to_ini(out / "config.ini")
        record.write(out)
    return record


# ---------------------------------------------------------------------------
# evaluation


def rmse_per_image(clean, recon) -> np.ndarray:
    return np.sqrt(np.mean((np.asarray(recon) - np.asarray(clean)) ** 2, axis=1))


def denoise_rmse(model, clean, sigmas, step_size: float, n_steps: int, rng: np.random.Generator) -> dict:
    """Average per-image RMSE between clean images and the denoised noisy copies, per noise level."""
    out = {}
    for sigma in sigmas:
        noisy = clean + sigma * rng.standard_normal(clean.shape)
        if n_steps > 0:
            recon = denoise(model, noisy, LangevinConfig(step_size, n_steps, noise_on=False))
        else:
            recon = noisy
        out[float(sigma)] = float(np.mean(rmse_per_image(clean, recon)))
    return out


def run_eval(checkpoint, config: ExperimentConfig, denoising: bool = False) -> dict:
    """SM loss of a checkpoint on the config's evaluation data (plus optional denoising RMSE)."""
    model = models.load_checkpoint(checkpoint) if not hasattr(checkpoint, "params") else checkpoint
    data = DataSource(config.dataset, config.seed)
    if model.input_dim != data.dim:
        raise ValueError(f"checkpoint expects D={model.input_dim}, data has D={data.dim}")
    grid = None
    if isinstance(model, models.TimeEbm):
        grid = objectives.time_grid(config.schedule(), config.loss.n_levels, config.loss.sigma_min,
                                    config.loss.sigma_max)
    x_eval = data.eval_set(config.eval.n_eval)
    metrics = {"sm_loss": evaluate_sm(model, x_eval, config, grid)}
    if denoising:
        rng = np.random.default_rng([config.seed, 15485863])
        metrics["rmse"] = denoise_rmse(model, x_eval, config.eval.sigmas, config.eval.denoise_step,
                                       config.eval.denoise_steps, rng)
    return metrics


def export_grid(model, bounds=(-4.0, 4.0, -4.0, 4.0), resolution: int = 100, out_prefix=None,
                t=None) -> np.ndarray:
    """exp(f) on a resolution x resolution grid, normalised by its maximum.

    Row 0 is the largest x2 (image orientation), column 0 the smallest x1.
    With ``out_prefix`` writes ``<prefix>.csv`` and an 8-bit ``<prefix>.pgm``.
    """
    if hasattr(model, "params") is False:
        model = models.load_checkpoint(model)
    if model.input_dim != 2:
        raise ValueError("density grids need a 2-D model")
    x1lo, x1hi, x2lo, x2hi = bounds
    xs = np.linspace(x1lo, x1hi, resolution)
    ys = np.linspace(x2hi, x2lo, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    f = models.energy(model, pts, t).reshape(resolution, resolution)
    dens = np.exp(f - f.max())
    if not np.isfinite(dens).all():
        raise ad.NonFiniteError(-1, "grid")
    if out_prefix is not None:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(prefix.with_suffix(".csv"), dens, delimiter=",", fmt="%.9g")
        pixels = np.clip(np.round(dens * 255), 0, 255).astype(np.uint8)
        header = f"P5\n{resolution} {resolution}\n255\n".encode()
        prefix.with_suffix(".pgm").write_bytes(header + pixels.tobytes())
    return dens


# ---------------------------------------------------------------------------
# verification suite


@dataclass(frozen=True)
class CheckRow:
    name: str
    value: float
    tolerance: float
    passed: bool

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"


def verify_suite(seed: int = 0) -> list:
    """Fast numerical checks of the theory on Gaussians and small MLPs."""
    from . import oracles

    rng = np.random.default_rng(seed)
    rows = []
    sched = VeSchedule("const", 1.0)
    rep = oracles.dcd_gaussian(oracles.GaussianSpec(0.0, 1.0), oracles.GaussianSpec(0.0, 2.0), sched, 1.0)
    rows.append(CheckRow("dcd_closed_form", rep.kl_difference, 5e-7, abs(rep.kl_difference - 0.0605077) < 5e-7))
    rows.append(CheckRow("dcd_two_route_rel_gap", rep.rel_gap, 0.01, rep.rel_gap < 0.01))

    mono = oracles.kl_monotone_check(oracles.GaussianSpec([0.5, -1.0], 0.7), oracles.GaussianSpec([0.0, 0.0], 1.8),
                                     sched, np.linspace(0.0, 1.0, 51))
    rows.append(CheckRow("kl_monotone_violation", mono["max_violation"], 0.0, mono["monotone"]))

    lem = float(oracles.log_density_residual(oracles.GaussianSpec([0.3, -0.2], 1.5), rng.standard_normal((64, 2))).max())
    rows.append(CheckRow("log_density_residual", lem, 1e-10, lem < 1e-10))

    quad = models.QuadraticEbm.isotropic(3, 1.0)
    hut = objectives.hutchinson_laplacian(quad, rng.standard_normal((32, 3)), 1, rng=rng)
    err = float(np.abs(hut + 3.0).max())
    rows.append(CheckRow("hutchinson_exact_on_isotropic", err, 1e-12, err < 1e-12))

    mlp = models.init_params((2, 16, 16, 1), seed=seed)
    mean, se = oracles.stein_residual(mlp, 20000, rng)
    rows.append(CheckRow("stein_residual_in_se", abs(mean) / se, 3.0, abs(mean) < 3 * se))

    x = datasets.sample_2d("moons", 64, rng)

    def dcd(m, xb, r):
        return objectives.dcd_ve_loss(m, xb, 0.0005, sched, rng=r)

    gc = oracles.grad_check(dcd, mlp, x, seed=seed)
    rows.append(CheckRow("dcd_grad_check", gc["max_rel_err"], 1e-4, gc["max_rel_err"] < 1e-4))
    return rows
