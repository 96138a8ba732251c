"""Append-only computation graph with differentiable backward passes.

Tensors are plain ``float64`` numpy arrays. A :class:`Graph` records nodes
lazily; values are produced by :func:`eval` against a binding of input
nodes. :func:`grad` appends the adjoint computation as *new* nodes, so its
outputs can be differentiated again (gradients of gradients, and of
Laplacians built from them).

Static shapes are tracked per node with ``None`` standing for the batch
dimension. Broadcasting is limited to suffix broadcasting, i.e. a
``(batch, dim)`` operand against a ``(dim,)`` or scalar operand.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import expit, ndtr

Shape = tuple  # tuple of int | None

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class GraphError(ValueError):
    """Malformed graph usage: unbound inputs, shape mismatches, bad wrt."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf during evaluation."""

    def __init__(self, node_id: int, op: str, message: str = ""):
        self.node_id = node_id
        self.op = op
        super().__init__(message or f"non-finite value produced by node {node_id} ({op})")


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    parents: tuple
    shape: Shape
    attrs: dict = field(default_factory=dict)
    # Only leading ``n_diff`` parents receive gradients; the rest are
    # shape references.
    n_diff: int = 0
    value: np.ndarray | None = None
    name: str | None = None


# ---------------------------------------------------------------------------
# activation derivatives


@functools.lru_cache(maxsize=None)
def _gelu_poly(order: int) -> tuple:
    # For order >= 2, d^k/da^k [a Phi(a)] = phi(a) * Q_k(a); coefficients low to high.
    q = Polynomial([2.0, 0.0, -1.0])
    for _ in range(order - 2):
        q = q.deriv() - Polynomial([0.0, 1.0]) * q
    return tuple(q.coef)


@functools.lru_cache(maxsize=None)
def _sigmoid_poly(order: int) -> tuple:
    # d^k/da^k sigmoid(a) as a polynomial in s = sigmoid(a).
    p = Polynomial([0.0, 1.0])
    ds = Polynomial([0.0, 1.0, -1.0])
    for _ in range(order):
        p = p.deriv() * ds
    return tuple(p.coef)


def _horner(coef: tuple, x: np.ndarray) -> np.ndarray:
    out = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        out *= x
        out += c
    return out


def activation(kind: str, order: int, a: np.ndarray, memo: dict | None = None) -> np.ndarray:
    """``order``-th derivative of the named activation evaluated at ``a``.

    ``memo`` may hold the pdf/cdf (gelu) or sigmoid (silu) of ``a`` and is
    filled in when empty, so sibling derivatives share that work.
    """
    memo = {} if memo is None else memo
    if kind == "gelu":
        if "cdf" not in memo:
            memo["cdf"] = ndtr(a)
        if order == 0:
            return a * memo["cdf"]
        if "pdf" not in memo:
            memo["pdf"] = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
        if order == 1:
            return memo["cdf"] + a * memo["pdf"]
        return memo["pdf"] * _horner(_gelu_poly(order), a)
    if kind == "silu":
        if "sig" not in memo:
            memo["sig"] = expit(a)
        s = memo["sig"]
        if order == 0:
            return a * s
        return a * _horner(_sigmoid_poly(order), s) + order * _horner(_sigmoid_poly(order - 1), s)
    raise GraphError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# graph construction


def _suffix_compatible(a: Shape, b: Shape) -> bool:
    if a == b:
        return True
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    return len(short) < len(long_) and tuple(long_[len(long_) - len(short):]) == tuple(short)


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(ax % ndim for ax in axes))
    if len(set(out)) != len(out):
        raise GraphError(f"repeated axes {axes}")
    return out


class Graph:
    """Append-only sequence of nodes.

    Node handles are integer ids. Builder methods validate static shapes
    and return the id of the appended node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._interned: dict = {}

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def shape(self, node_id: int) -> Shape:
        return self.nodes[node_id].shape

    def _append(self, op, parents=(), shape=(), n_diff=None, attrs=None, value=None, name=None) -> int:
        parents = tuple(int(p) for p in parents)
        nid = len(self.nodes)
        for p in parents:
            if not 0 <= p < nid:
                raise GraphError(f"parent {p} is not an existing node")
        key = None
        if parents:
            # structurally identical interior nodes compute the same value
            key = (op, parents, tuple(sorted((attrs or {}).items())))
            if key in self._interned:
                return self._interned[key]
            self._interned[key] = nid
        self.nodes.append(Node(
            id=nid, op=op, parents=parents, shape=tuple(shape),
            attrs=attrs or {}, n_diff=len(parents) if n_diff is None else n_diff,
            value=value, name=name,
        ))
        return nid

    # leaves -------------------------------------------------------------

    def input(self, shape: Shape, name: str | None = None) -> int:
        """Placeholder bound at evaluation time. ``None`` marks the batch axis."""
        return self._append("input", shape=shape, name=name)

    def param(self, value, name: str | None = None) -> int:
        """Differentiable leaf carrying its own value."""
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        return self._append("param", shape=value.shape, value=value, name=name)

    def constant(self, value) -> int:
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        return self._append("constant", shape=value.shape, value=value)

    def zeros_like(self, ref: int) -> int:
        return self._append("zeros", (ref,), self.shape(ref), n_diff=0)

    # elementwise --------------------------------------------------------

    def _binary(self, op, a, b):
        sa, sb = self.shape(a), self.shape(b)
        if not _suffix_compatible(sa, sb):
            raise GraphError(f"{op}: incompatible shapes {sa} and {sb}")
        return self._append(op, (a, b), sa if len(sa) >= len(sb) else sb)

    def add(self, a: int, b: int) -> int:
        return self._binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.scale(b, -1.0))

    def mul(self, a: int, b: int) -> int:
        return self._binary("mul", a, b)

    def scale(self, a: int, c: float) -> int:
        return self._append("scale", (a,), self.shape(a), attrs={"c": float(c)})

    def square(self, a: int) -> int:
        return self._append("square", (a,), self.shape(a))

    def exp(self, a: int) -> int:
        return self._append("exp", (a,), self.shape(a))

    def act(self, a: int, kind: str, order: int = 0) -> int:
        if kind not in ("gelu", "silu"):
            raise GraphError(f"unknown activation {kind!r}")
        op = kind if order == 0 else f"{kind}_d{order}"
        return self._append(op, (a,), self.shape(a), attrs={"kind": kind, "order": order})

    def gelu(self, a: int) -> int:
        return self.act(a, "gelu")

    def silu(self, a: int) -> int:
        return self.act(a, "silu")

    # reductions and shape ops ---------------------------------------------

    def sum(self, a: int, axes=None) -> int:
        sa = self.shape(a)
        axes = _norm_axes(axes, len(sa))
        out = tuple(d for i, d in enumerate(sa) if i not in axes)
        return self._append("sum", (a,), out, attrs={"axes": axes})

    def mean(self, a: int, axes=None) -> int:
        sa = self.shape(a)
        axes = _norm_axes(axes, len(sa))
        out = tuple(d for i, d in enumerate(sa) if i not in axes)
        return self._append("mean", (a,), out, attrs={"axes": axes})

    def broadcast(self, a: int, ref: int, axes, mean: bool = False) -> int:
        """Insert ``axes`` into ``a`` and broadcast to the runtime shape of ``ref``.

        With ``mean=True`` the result is divided by the number of broadcast
        elements, making it the adjoint of :meth:`mean`.
        """
        sr = self.shape(ref)
        axes = _norm_axes(axes, len(sr))
        expect = tuple(d for i, d in enumerate(sr) if i not in axes)
        if expect != self.shape(a):
            raise GraphError(f"broadcast: {self.shape(a)} does not fit {sr} minus axes {axes}")
        return self._append("broadcast", (a, ref), sr, n_diff=1, attrs={"axes": axes, "mean": mean})

    def dot(self, a: int, b: int) -> int:
        """Row-wise inner product over the last axis."""
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb or len(sa) == 0:
            raise GraphError(f"dot: shapes {sa} and {sb} differ")
        return self._append("dot", (a, b), sa[:-1])

    def concat(self, a: int, b: int) -> int:
        """Concatenate along the last axis."""
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != len(sb) or sa[:-1] != sb[:-1] or sa[-1] is None or sb[-1] is None:
            raise GraphError(f"concat: incompatible shapes {sa} and {sb}")
        return self._append("concat", (a, b), sa[:-1] + (sa[-1] + sb[-1],), attrs={"split": sa[-1]})

    def slice(self, a: int, start: int, stop: int) -> int:
        """``a[..., start:stop]``."""
        sa = self.shape(a)
        if not sa or sa[-1] is None or not 0 <= start < stop <= sa[-1]:
            raise GraphError(f"slice [{start}:{stop}] out of range for {sa}")
        return self._append("slice", (a,), sa[:-1] + (stop - start,), attrs={"start": start, "stop": stop})

    def embed(self, a: int, ref: int, start: int, stop: int) -> int:
        """Zeros shaped like ``ref`` with ``a`` written into ``[..., start:stop]``."""
        sr = self.shape(ref)
        if self.shape(a) != sr[:-1] + (stop - start,):
            raise GraphError(f"embed: {self.shape(a)} does not fit {sr}[{start}:{stop}]")
        return self._append("embed", (a, ref), sr, n_diff=1, attrs={"start": start, "stop": stop})

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2 or (sa[1] is not None and sb[0] is not None and sa[1] != sb[0]):
            raise GraphError(f"matmul: incompatible shapes {sa} and {sb}")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def transpose(self, a: int) -> int:
        sa = self.shape(a)
        if len(sa) != 2:
            raise GraphError("transpose needs a 2-D operand")
        return self._append("transpose", (a,), (sa[1], sa[0]))

    def affine(self, x: int, w: int, b: int) -> int:
        """``x @ w + b`` for ``x`` (batch, in), ``w`` (in, out), ``b`` (out,)."""
        sx, sw, sb = self.shape(x), self.shape(w), self.shape(b)
        if len(sx) != 2 or len(sw) != 2 or sx[1] != sw[0] or sb != (sw[1],):
            raise GraphError(f"affine: incompatible shapes {sx}, {sw}, {sb}")
        return self._append("affine", (x, w, b), (sx[0], sw[1]))


# ---------------------------------------------------------------------------
# evaluation


def _ancestors(graph: Graph, roots: Iterable[int]) -> list[int]:
    seen = set()
    stack = list(roots)
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(graph.nodes[n].parents)
    return sorted(seen)


def _forward(node: Node, v: list) -> np.ndarray:
    op = node.op
    a = node.attrs
    if op == "add":
        return v[0] + v[1]
    if op == "mul":
        return v[0] * v[1]
    if op == "scale":
        return a["c"] * v[0]
    if op == "square":
        return v[0] * v[0]
    if op == "exp":
        return np.exp(v[0])
    if op == "affine":
        return v[0] @ v[1] + v[2]
    if op == "matmul":
        return v[0] @ v[1]
    if op == "transpose":
        return v[0].T
    if op == "sum":
        return np.sum(v[0], axis=a["axes"])
    if op == "mean":
        return np.mean(v[0], axis=a["axes"])
    if op == "broadcast":
        out = np.broadcast_to(np.expand_dims(v[0], a["axes"]), v[1].shape)
        if a["mean"]:
            n = 1
            for ax in a["axes"]:
                n *= v[1].shape[ax]
            out = out / n
        return out
    if op == "dot":
        return np.einsum("...i,...i->...", v[0], v[1])
    if op == "concat":
        return np.concatenate([v[0], v[1]], axis=-1)
    if op == "slice":
        return v[0][..., a["start"]:a["stop"]]
    if op == "embed":
        out = np.zeros(v[1].shape)
        out[..., a["start"]:a["stop"]] = v[0]
        return out
    if op == "zeros":
        return np.zeros(v[0].shape)
    raise GraphError(f"no forward rule for op {op!r}")


def _check_shape(node: Node, value: np.ndarray):
    if len(value.shape) != len(node.shape) or any(
        d is not None and d != r for d, r in zip(node.shape, value.shape)
    ):
        raise GraphError(f"node {node.id} ({node.op}): expected shape {node.shape}, got {value.shape}")


def eval(graph: Graph, node, bindings: dict | None = None):
    """Evaluate one node id, or a sequence of ids, under ``bindings``.

    Intermediate values are shared across all requested nodes. Raises
    :class:`GraphError` on unbound inputs or shape mismatches and
    :class:`NonFiniteError` naming the first node that produced NaN/Inf.
    """
    bindings = bindings or {}
    single = isinstance(node, (int, np.integer))
    targets = [int(node)] if single else [int(n) for n in node]
    cache: dict[int, np.ndarray] = {}
    act_memo: dict[int, dict] = {}
    # overflow surfaces as NonFiniteError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for nid in _ancestors(graph, targets):
            nd = graph.nodes[nid]
            if nd.op == "input":
                if nid not in bindings:
                    raise GraphError(f"input node {nid} ({nd.name or 'unnamed'}) is unbound")
                val = np.asarray(bindings[nid], dtype=np.float64)
                _check_shape(nd, val)
            elif nd.op in ("param", "constant"):
                val = nd.value
            elif "kind" in nd.attrs:
                src = nd.parents[0]
                val = activation(nd.attrs["kind"], nd.attrs["order"], cache[src], act_memo.setdefault(src, {}))
            else:
                try:
                    val = _forward(nd, [cache[p] for p in nd.parents])
                except ValueError as exc:
                    raise GraphError(f"node {nid} ({nd.op}): {exc}") from exc
            val = np.asarray(val, dtype=np.float64)
            # sum is finite iff all entries are, barring overflow in the sum itself
            if not np.isfinite(val.sum()) and not np.isfinite(val).all():
                raise NonFiniteError(nid, nd.op)
            cache[nid] = val
    out = [cache[t] for t in targets]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# reverse mode


def _descendants(graph: Graph, sources: Iterable[int], limit: int) -> set:
    reach = set(sources)
    for nd in graph.nodes[min(reach, default=limit + 1):limit + 1]:
        if nd.id not in reach and any(p in reach for p in nd.parents[:nd.n_diff]):
            reach.add(nd.id)
    return reach


def _accumulate(graph: Graph, grads: dict, nid: int, g: int):
    if nid in grads:
        grads[nid] = graph.add(grads[nid], g)
    else:
        grads[nid] = g


def _vjp(graph: Graph, nd: Node, g: int, i: int) -> int:
    """Adjoint contribution of upstream grad ``g`` to parent slot ``i``."""
    op, p, a = nd.op, nd.parents, nd.attrs
    if op == "add":
        return _unbroadcast(graph, g, p[i])
    if op == "mul":
        return _unbroadcast(graph, graph.mul(g, p[1 - i]), p[i])
    if op == "scale":
        return graph.scale(g, a["c"])
    if op == "square":
        return graph.mul(g, graph.scale(p[0], 2.0))
    if op == "exp":
        return graph.mul(g, nd.id)
    if op == "affine":
        if i == 0:
            return graph.matmul(g, graph.transpose(p[1]))
        if i == 1:
            return graph.matmul(graph.transpose(p[0]), g)
        return graph.sum(g, axes=(0,))
    if op == "matmul":
        if i == 0:
            return graph.matmul(g, graph.transpose(p[1]))
        return graph.matmul(graph.transpose(p[0]), g)
    if op == "transpose":
        return graph.transpose(g)
    if op == "sum":
        return graph.broadcast(g, p[0], a["axes"])
    if op == "mean":
        return graph.broadcast(g, p[0], a["axes"], mean=True)
    if op == "broadcast":
        return graph.mean(g, a["axes"]) if a["mean"] else graph.sum(g, a["axes"])
    if op == "dot":
        last = len(graph.shape(p[0])) - 1
        return graph.mul(graph.broadcast(g, p[i], (last,)), p[1 - i])
    if op == "concat":
        width = graph.shape(p[i])[-1]
        start = 0 if i == 0 else a["split"]
        return graph.slice(g, start, start + width)
    if op == "slice":
        return graph.embed(g, p[0], a["start"], a["stop"])
    if op == "embed":
        return graph.slice(g, a["start"], a["stop"])
    if "kind" in a:
        return graph.mul(g, graph.act(p[0], a["kind"], a["order"] + 1))
    raise GraphError(f"no backward rule for op {op!r}")


def _unbroadcast(graph: Graph, g: int, target: int) -> int:
    sg, st = graph.shape(g), graph.shape(target)
    if sg == st:
        return g
    return graph.sum(g, axes=tuple(range(len(sg) - len(st))))


def grad(graph: Graph, scalar: int, wrt: Sequence[int]) -> list[int]:
    """Append nodes computing d scalar / d wrt[i]; return their ids.

    The returned nodes are ordinary graph nodes, so ``grad`` may be applied
    to expressions built from them. A ``wrt`` node that ``scalar`` does not
    depend on yields a structural zero node rather than an error.
    """
    if graph.shape(scalar) != ():
        raise GraphError(f"grad needs a scalar node, node {scalar} has shape {graph.shape(scalar)}")
    wrt = [int(w) for w in wrt]
    for w in wrt:
        if graph.nodes[w].op not in ("input", "param"):
            raise GraphError(f"wrt node {w} is a {graph.nodes[w].op!r}, not an input or param")
    live = _descendants(graph, wrt, scalar) & set(_ancestors(graph, [scalar]))
    grads: dict[int, int] = {}
    if scalar in live:
        grads[scalar] = graph.constant(1.0)
    for nid in sorted(live, reverse=True):
        if nid not in grads:
            continue
        nd = graph.nodes[nid]
        for i, parent in enumerate(nd.parents[:nd.n_diff]):
            if parent in live:
                _accumulate(graph, grads, parent, _vjp(graph, nd, grads[nid], i))
    return [grads[w] if w in grads else graph.zeros_like(w) for w in wrt]


# ---------------------------------------------------------------------------
# numerical oracle


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(-1, "finite_diff", f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
