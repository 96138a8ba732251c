"""Energy functions f(x) (log-density up to a constant) and their x-derivatives.

Three model families share one duck-typed interface:

* ``input_dim`` -- dimension of x;
* ``params`` -- tuple of float64 arrays (the flattened θ is their concatenation);
* ``arch`` -- hashable description of everything except parameter values;
* ``forward(graph, x, params, tfeat=None)`` -- append the energy node, shape (batch,);
* ``with_params(params)`` -- copy with new parameter values.

Models are immutable values; training produces new instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

MAX_EXACT_DIM = 16


def _frozen(arrays) -> tuple:
    out = []
    for a in arrays:
        a = np.array(a, dtype=np.float64)
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class MlpEbm:
    """GELU (or SiLU) multilayer perceptron with a scalar output."""

    dims: tuple
    params: tuple
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "params", _frozen(self.params))
        if self.dims[-1] != 1:
            raise ValueError("the last layer must have a single output")
        if len(self.params) != 2 * (len(self.dims) - 1):
            raise ValueError("need one weight and one bias per layer")
        for shape, p in zip(self.param_shapes, self.params):
            if p.shape != shape:
                raise ValueError(f"parameter shape {p.shape} != {shape}")

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def param_shapes(self) -> list:
        shapes = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in zip(self.dims[:-1], self.dims[1:]))

    @property
    def arch(self):
        return ("mlp", self.dims, self.activation)

    def forward(self, graph: ad.Graph, x: int, params, tfeat=None) -> int:
        h = x
        n_layers = len(self.dims) - 1
        for k in range(n_layers):
            h = graph.affine(h, params[2 * k], params[2 * k + 1])
            if k < n_layers - 1:
                h = graph.act(h, self.activation)
        return graph.sum(h, axes=(1,))

    def with_params(self, params) -> "MlpEbm":
        return replace(self, params=tuple(params))


def init_params(dims, seed: int = 0, activation: str = "gelu") -> MlpEbm:
    """Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(1.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return MlpEbm(tuple(dims), tuple(params), activation=activation, seed=seed)


def time_features(t, batch: int, kind: str = "scalar", n_freq: int = 4, t_max: float = 1.0) -> np.ndarray:
    """Time conditioning columns appended to x: either ``t`` itself or sin/cos pairs."""
    t = float(t)
    if kind == "scalar":
        row = np.array([t])
    elif kind == "sinusoidal":
        freqs = np.pi * 2.0 ** np.arange(n_freq) / t_max
        row = np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])
    else:
        raise ValueError(f"unknown time feature {kind!r}")
    return np.broadcast_to(row, (batch, row.size)).copy()


@dataclass(frozen=True, eq=False)
class TimeEbm:
    """f(x, t): an MLP applied to the concatenation [x, tau(t)]."""

    net: MlpEbm
    x_dim: int
    time_feature: str = "scalar"
    n_freq: int = 4
    t_max: float = 1.0

    def __post_init__(self):
        if self.net.input_dim != self.x_dim + self.feature_dim:
            raise ValueError("network input must be x_dim + time feature width")

    @property
    def feature_dim(self) -> int:
        return 1 if self.time_feature == "scalar" else 2 * self.n_freq

    @property
    def input_dim(self) -> int:
        return self.x_dim

    @property
    def params(self):
        return self.net.params

    @property
    def param_shapes(self):
        return self.net.param_shapes

    @property
    def arch(self):
        return ("time", self.net.arch, self.x_dim, self.time_feature, self.n_freq)

    def features(self, t, batch: int) -> np.ndarray:
        return time_features(t, batch, self.time_feature, self.n_freq, self.t_max)

    def forward(self, graph: ad.Graph, x: int, params, tfeat=None) -> int:
        if tfeat is None:
            raise ad.GraphError("TimeEbm.forward needs a time-feature node")
        return self.net.forward(graph, graph.concat(x, tfeat), params)

    def with_params(self, params) -> "TimeEbm":
        return replace(self, net=self.net.with_params(params))

    def zero_time_weights(self) -> "TimeEbm":
        """Copy whose first layer ignores the time columns."""
        w0 = np.array(self.net.params[0])
        w0[self.x_dim:] = 0.0
        return self.with_params((w0,) + self.net.params[1:])


def init_time_ebm(x_dim: int, hidden=(300, 300, 300), seed: int = 0, activation: str = "gelu",
                  time_feature: str = "scalar", n_freq: int = 4, t_max: float = 1.0) -> TimeEbm:
    width = 1 if time_feature == "scalar" else 2 * n_freq
    net = init_params((x_dim + width, *hidden, 1), seed=seed, activation=activation)
    return TimeEbm(net, x_dim, time_feature, n_freq, t_max)


@dataclass(frozen=True, eq=False)
class QuadraticEbm:
    """f(x) = -1/2 sum_i prec_i (x_i - mean_i)^2 + offset.

    The log-density of N(mean, diag(1/prec)) up to a constant; used as the
    analytically tractable model throughout the tests and oracles.
    """

    mean: np.ndarray
    prec: np.ndarray
    offset: float = 0.0
    params: tuple = field(init=False)

    def __post_init__(self):
        mean, prec = _frozen([self.mean, self.prec])
        prec = np.broadcast_to(prec, mean.shape).copy()
        prec.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "prec", prec)
        object.__setattr__(self, "params", _frozen([mean, prec, self.offset]))

    @classmethod
    def isotropic(cls, dim: int, var: float = 1.0, mean=None, offset: float = 0.0) -> "QuadraticEbm":
        mean = np.zeros(dim) if mean is None else mean
        return cls(mean, np.full(dim, 1.0 / var), offset)

    @property
    def input_dim(self) -> int:
        return self.mean.size

    @property
    def param_shapes(self):
        return [self.mean.shape, self.mean.shape, ()]

    @property
    def arch(self):
        return ("quadratic", self.mean.size)

    def forward(self, graph: ad.Graph, x: int, params, tfeat=None) -> int:
        mean, prec, offset = params
        d = graph.sub(x, mean)
        quad = graph.sum(graph.mul(graph.square(d), prec), axes=(1,))
        return graph.add(graph.scale(quad, -0.5), offset)

    def with_params(self, params) -> "QuadraticEbm":
        mean, prec, offset = params
        return QuadraticEbm(mean, prec, float(offset))


def shift_energy(model, c: float):
    """Same model with c added to the output (last bias / offset)."""
    params = list(model.params)
    params[-1] = params[-1] + c
    return model.with_params(params)


# ---------------------------------------------------------------------------
# graph helpers


def score_node(graph: ad.Graph, f: int, x: int) -> int:
    """(batch, D) gradient of the per-row energy ``f`` with respect to ``x``.

    Rows do not interact, so the gradient of the batch sum is the per-row score.
    """
    return ad.grad(graph, graph.sum(f), [x])[0]


def laplacian_node(graph: ad.Graph, s: int, x: int, dim: int) -> int:
    """Exact per-row Laplacian from the score node: one directional grad per coordinate."""
    if dim > MAX_EXACT_DIM:
        raise ValueError(f"exact Laplacian limited to D <= {MAX_EXACT_DIM}; use Hutchinson mode")
    total = None
    for i in range(dim):
        col = graph.sum(graph.slice(s, i, i + 1))
        h_row = ad.grad(graph, col, [x])[0]
        diag = graph.slice(h_row, i, i + 1)
        total = diag if total is None else graph.add(total, diag)
    return graph.sum(total, axes=(1,))


class EnergyProgram:
    """Graph computing energy, score and (lazily) the exact Laplacian for one architecture.

    Parameters enter as input nodes, so one program serves every parameter
    value of the architecture.
    """

    def __init__(self, model):
        g = ad.Graph()
        self.graph = g
        self.dim = model.input_dim
        self.x = g.input((None, self.dim), name="x")
        self.params = [g.input(s, name=f"theta{i}") for i, s in enumerate(model.param_shapes)]
        self.tfeat = None
        if isinstance(model, TimeEbm):
            self.tfeat = g.input((None, model.feature_dim), name="tau")
        self.f = model.forward(g, self.x, self.params, self.tfeat)
        self.s = score_node(g, self.f, self.x)
        self._lap = None

    @property
    def lap(self) -> int:
        if self._lap is None:
            self._lap = laplacian_node(self.graph, self.s, self.x, self.dim)
        return self._lap

    def bindings(self, model, x, t=None) -> dict:
        x = _as_batch(x, self.dim)
        b = {self.x: x}
        b.update(zip(self.params, model.params))
        if self.tfeat is not None:
            if t is None:
                raise ValueError("time-conditioned model needs t")
            b[self.tfeat] = model.features(t, x.shape[0])
        return b


_PROGRAMS: dict = {}


def program(model) -> EnergyProgram:
    """Shared :class:`EnergyProgram` for the model's architecture."""
    prog = _PROGRAMS.get(model.arch)
    if prog is None:
        prog = _PROGRAMS[model.arch] = EnergyProgram(model)
    return prog


def _as_batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected input of shape (batch, {dim}), got {x.shape}")
    return x


def energy(model, x, t=None) -> np.ndarray:
    """f(x) per row."""
    prog = program(model)
    return ad.eval(prog.graph, prog.f, prog.bindings(model, x, t))


def score(model, x, t=None) -> np.ndarray:
    """grad_x f(x) per row; equal to the score of the normalised density."""
    prog = program(model)
    return ad.eval(prog.graph, prog.s, prog.bindings(model, x, t))


def laplacian_exact(model, x, t=None) -> np.ndarray:
    """Sum of unmixed second derivatives of f per row (D <= 16)."""
    if model.input_dim > MAX_EXACT_DIM:
        raise ValueError(f"exact Laplacian limited to D <= {MAX_EXACT_DIM}; use Hutchinson mode")
    prog = program(model)
    return ad.eval(prog.graph, prog.lap, prog.bindings(model, x, t))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"DCDEBM01\n"


def _header(model) -> dict:
    if isinstance(model, MlpEbm):
        return {"kind": "mlp", "dims": list(model.dims), "activation": model.activation, "seed": model.seed}
    if isinstance(model, TimeEbm):
        return {"kind": "time", "dims": list(model.net.dims), "activation": model.net.activation,
                "seed": model.net.seed, "x_dim": model.x_dim, "time_feature": model.time_feature,
                "n_freq": model.n_freq, "t_max": model.t_max}
    if isinstance(model, QuadraticEbm):
        return {"kind": "quadratic", "dims": [model.input_dim], "activation": "none", "seed": 0}
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model, path) -> Path:
    """Magic line, one JSON header line, then little-endian float64 parameters."""
    path = Path(path)
    header = _header(model)
    header["n_values"] = int(sum(np.size(p) for p in model.params))
    flat = np.concatenate([np.ravel(p) for p in model.params]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(flat.tobytes())
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = data.index(b"\n", len(_MAGIC))
    header = json.loads(data[len(_MAGIC):end])
    flat = np.frombuffer(data[end + 1:], dtype="<f8")
    if flat.size != header["n_values"]:
        raise ValueError(f"{path}: expected {header['n_values']} values, found {flat.size}")
    kind = header["kind"]
    if kind == "quadratic":
        d = header["dims"][0]
        return QuadraticEbm(flat[:d].copy(), flat[d:2 * d].copy(), float(flat[2 * d]))
    dims = tuple(header["dims"])
    template = init_params(dims, seed=header["seed"], activation=header["activation"])
    params, pos = [], 0
    for shape in template.param_shapes:
        n = int(np.prod(shape))
        params.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    net = template.with_params(params)
    if kind == "mlp":
        return net
    return TimeEbm(net, header["x_dim"], header["time_feature"], header["n_freq"], header["t_max"])
