"""Langevin chains, the persistent replay buffer and deterministic denoising."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import models


class ChainDivergedError(FloatingPointError):
    """A Langevin iterate became non-finite."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Langevin chain produced a non-finite iterate at step {step}")


@dataclass(frozen=True)
class LangevinConfig:
    step_size: float = 1e-3
    n_steps: int = 10
    noise_on: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")


def langevin_run(model, x_init, cfg: LangevinConfig, rng: np.random.Generator | None = None, t=None) -> np.ndarray:
    """Euler-Maruyama chain x <- x + (eps/2) score(x) + sqrt(eps) xi.

    Returns a plain array: downstream losses see the negatives as constants.
    With ``cfg.noise_on`` false the noise term is dropped (gradient ascent).
    """
    x = np.array(x_init, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ChainDivergedError(0)
    if cfg.noise_on and rng is None:
        raise ValueError("a random generator is required when noise is on")
    eps = cfg.step_size
    prog = models.program(model)
    bind = prog.bindings(model, x, t)
    sqrt_eps = np.sqrt(eps)
    for step in range(1, cfg.n_steps + 1):
        bind[prog.x] = x
        try:
            s = ad.eval(prog.graph, prog.s, bind)
        except ad.NonFiniteError:
            raise ChainDivergedError(step) from None
        x = x + 0.5 * eps * s
        if cfg.noise_on:
            x = x + sqrt_eps * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            raise ChainDivergedError(step)
    return x


def denoise(model, x_noisy, cfg: LangevinConfig) -> np.ndarray:
    """Noiseless Langevin ascent on the energy; deterministic."""
    return langevin_run(model, x_noisy, replace(cfg, noise_on=False))


@dataclass(frozen=True, eq=False)
class ReplayBuffer:
    """FIFO store of persistent chain states with uniform-box reinitialisation."""

    capacity: int
    low: np.ndarray
    high: np.ndarray
    reinit_fraction: float = 0.05
    samples: np.ndarray | None = None
    inserted: int = 0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if not 0.0 <= self.reinit_fraction <= 1.0:
            raise ValueError("reinit_fraction must lie in [0, 1]")
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if self.samples is None:
            object.__setattr__(self, "samples", np.empty((0, low.size)))

    @classmethod
    def from_data(cls, data, capacity: int, reinit_fraction: float = 0.05, inflate: float = 0.1) -> "ReplayBuffer":
        """Empty buffer whose init box is the data bounding box inflated by ``inflate`` per side."""
        data = np.asarray(data, dtype=np.float64)
        lo, hi = data.min(axis=0), data.max(axis=0)
        pad = inflate * (hi - lo)
        return cls(capacity, lo - pad, hi + pad, reinit_fraction)

    @property
    def size(self) -> int:
        return len(self.samples)

    def fresh(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.low.size))

    def push(self, x) -> "ReplayBuffer":
        x = np.asarray(x, dtype=np.float64)
        stacked = np.concatenate([self.samples, x])[-self.capacity:]
        return replace(self, samples=stacked, inserted=self.inserted + len(x))

    def with_samples(self, x) -> "ReplayBuffer":
        x = np.asarray(x, dtype=np.float64)[-self.capacity:]
        return replace(self, samples=x.copy(), inserted=len(x))


def draw_from_buffer(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Batch of chain starts: buffer rows (fresh rows while the buffer is short) with reinit."""
    if buffer.size >= batch_size:
        idx = rng.choice(buffer.size, size=batch_size, replace=False)
        x = buffer.samples[idx].copy()
    else:
        x = np.concatenate([buffer.samples, buffer.fresh(batch_size - buffer.size, rng)])
    n_re = int(round(buffer.reinit_fraction * batch_size))
    if n_re:
        rows = rng.choice(batch_size, size=n_re, replace=False)
        x[rows] = buffer.fresh(n_re, rng)
    return x


def pcd_negatives(model, buffer: ReplayBuffer, batch_size: int, cfg: LangevinConfig,
                  rng: np.random.Generator, t=None):
    """Persistent-chain negatives; returns ``(negatives, updated_buffer)``.

    A buffer holding fewer than ``batch_size`` rows is topped up from its
    init box, so an empty buffer bootstraps itself.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    x = draw_from_buffer(buffer, batch_size, rng)
    x = langevin_run(model, x, cfg, rng, t)
    return x, buffer.push(x)
