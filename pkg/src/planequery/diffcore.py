"""Small deterministic reverse-mode differentiation core.

Every operation is recorded on a :class:`Graph` as ``(kind, inputs, attrs,
value)``.  Gradients come from :func:`backward`; :func:`grad_check` replays the
recorded sequence with perturbed parameter values and compares against central
finite differences.

All arithmetic is float64.  There is no broadcasting: operands of elementwise
kinds must have identical shapes, and the only mixed case is multiplying a
tensor by a Python scalar (``scale``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Counter-based random stream.

    A stream is identified by ``(seed, *path)``; the same identity produces the
    same draws on every platform (PCG64 via ``SeedSequence``).
    """

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.counter = 0
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.path]))
        )

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.seed, *self.path, *path)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.counter += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)


def init_uniform(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# op registry


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    vjp: Callable  # (g, out, inputs, attrs) -> tuple of grads (None = no grad)
    arity: int | None  # None = variadic


OPS: dict[str, OpDef] = {}


def register(kind: str, arity: int | None = 1):
    def deco(pair):
        fwd, vjp = pair
        OPS[kind] = OpDef(fwd, vjp, arity)
        return pair

    return deco


def _same_shape(kind, *xs):
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise ShapeError(f"{kind}: shapes {s} and {x.shape} differ")


def _ndim(kind, x, n):
    if x.ndim != n:
        raise ShapeError(f"{kind}: expected {n}-d input, got shape {x.shape}")


def _matmul_fwd(a, b):
    _ndim("matmul", a, 2)
    _ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


register("matmul", 2)((_matmul_fwd, lambda g, out, x, at: (g @ x[1].T, x[0].T @ g)))


def _transpose_fwd(a):
    _ndim("transpose", a, 2)
    return a.T.copy()


register("transpose")((_transpose_fwd, lambda g, out, x, at: (g.T,)))


def _binary(kind, f):
    def fwd(a, b):
        _same_shape(kind, a, b)
        return f(a, b)

    return fwd


register("add", 2)((_binary("add", np.add), lambda g, out, x, at: (g, g)))
register("subtract", 2)((_binary("subtract", np.subtract), lambda g, out, x, at: (g, -g)))
register("multiply", 2)(
    (_binary("multiply", np.multiply), lambda g, out, x, at: (g * x[1], g * x[0]))
)


def _div_fwd(a, b):
    _same_shape("divide", a, b)
    if np.any(b == 0):
        raise DomainError("divide: zero denominator")
    return a / b


register("divide", 2)(
    (_div_fwd, lambda g, out, x, at: (g / x[1], -g * out / x[1]))
)

register("scale")((lambda a, c: a * c, lambda g, out, x, at: (g * at["c"],)))


def _add_row_fwd(a, b):
    _ndim("add_row", a, 2)
    if b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row: row vector {b.shape} does not fit {a.shape}")
    return a + b


register("add_row", 2)((_add_row_fwd, lambda g, out, x, at: (g, g.sum(axis=0, keepdims=True))))


def _concat_fwd(*xs):
    if not xs:
        raise ShapeError("concat: no inputs")
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.ndim == 0 or x.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ: {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def _concat_vjp(g, out, xs, at):
    grads = []
    start = 0
    for x in xs:
        stop = start + x.shape[-1]
        grads.append(g[..., start:stop])
        start = stop
    return tuple(grads)


register("concat", None)((_concat_fwd, _concat_vjp))


def _slice_index(ndim, axis, start, stop):
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _slice_fwd(a, axis, start, stop):
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {a.shape[axis]}")
    return a[_slice_index(a.ndim, axis, start, stop)].copy()


def _slice_vjp(g, out, x, at):
    full = np.zeros_like(x[0])
    full[_slice_index(x[0].ndim, at["axis"], at["start"], at["stop"])] = g
    return (full,)


register("slice")((_slice_fwd, _slice_vjp))


def _reshape_fwd(a, shape):
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape).copy()


register("reshape")((_reshape_fwd, lambda g, out, x, at: (g.reshape(x[0].shape),)))


def _softmax(a, axis):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(axis):
    def vjp(g, out, x, at):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return vjp


def _softmax_fwd(axis):
    def fwd(a):
        _ndim("softmax", a, 2)
        return _softmax(a, axis)

    return fwd


register("row_softmax")((_softmax_fwd(1), _softmax_vjp(1)))
register("col_softmax")((_softmax_fwd(0), _softmax_vjp(0)))

register("relu")((lambda a: np.maximum(a, 0.0), lambda g, out, x, at: (g * (x[0] > 0),)))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


register("sigmoid")((_sigmoid, lambda g, out, x, at: (g * out * (1.0 - out),)))
register("exp")((np.exp, lambda g, out, x, at: (g * out,)))


def _log_fwd(a):
    if np.any(a <= 0):
        raise DomainError("log of non-positive value")
    return np.log(a)


register("log")((_log_fwd, lambda g, out, x, at: (g / x[0],)))


def _sqrt_fwd(a):
    if np.any(a <= 0):
        raise DomainError("sqrt of non-positive value")
    return np.sqrt(a)


register("sqrt")((_sqrt_fwd, lambda g, out, x, at: (0.5 * g / out,)))
register("abs")((np.abs, lambda g, out, x, at: (g * np.sign(x[0]),)))
register("softplus")(
    (lambda a: np.logaddexp(0.0, a), lambda g, out, x, at: (g * _sigmoid(x[0]),))
)
register("clamp")(
    (
        lambda a, lo, hi: np.clip(a, lo, hi),
        lambda g, out, x, at: (g * ((x[0] > at["lo"]) & (x[0] < at["hi"])),),
    )
)
register("sin")((np.sin, lambda g, out, x, at: (g * np.cos(x[0]),)))
register("cos")((np.cos, lambda g, out, x, at: (-g * np.sin(x[0]),)))


def _atan2_vjp(g, out, x, at):
    y, xx = x
    r2 = y * y + xx * xx
    return (g * xx / r2, -g * y / r2)


register("atan2", 2)((_binary("atan2", np.arctan2), _atan2_vjp))


def _vinv_coef(theta):
    # (1 - theta sin(theta) / (2 (1 - cos theta))) / theta^2, series below 1e-3
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    small = np.abs(theta) < 1e-3
    t = theta[small]
    out[small] = 1.0 / 12.0 + t * t / 720.0 + t**4 / 30240.0
    t = theta[~small]
    half = 0.5 * t
    out[~small] = 1.0 / (t * t) - np.cos(half) / np.sin(half) / (2.0 * t)
    return out


def _vinv_coef_grad(theta):
    out = np.empty_like(theta)
    small = np.abs(theta) < 1e-3
    t = theta[small]
    out[small] = t / 360.0 + t**3 / 7560.0
    t = theta[~small]
    half = 0.5 * t
    s = np.sin(half)
    out[~small] = -2.0 / t**3 + 1.0 / (4.0 * t * s * s) + np.cos(half) / s / (2.0 * t * t)
    return out


register("so3_vinv_coef")(
    (_vinv_coef, lambda g, out, x, at: (g * _vinv_coef_grad(x[0]),))
)


def _l2n_fwd(a):
    if a.ndim == 0:
        raise ShapeError("l2_normalize needs at least 1-d input")
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("l2_normalize of zero vector")
    return a / norm


def _l2n_vjp(g, out, x, at):
    norm = np.sqrt((x[0] * x[0]).sum(axis=-1, keepdims=True))
    return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)


register("l2_normalize")((_l2n_fwd, _l2n_vjp))


def _reduce_vjp(mean):
    def vjp(g, out, x, at):
        a = x[0]
        axis = at["axis"]
        if axis is None:
            full = np.full_like(a, float(g))
            return (full / a.size if mean else full,)
        full = np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()
        return (full / a.shape[axis] if mean else full,)

    return vjp


def _check_axis(a, axis):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


def _sum_fwd(a, axis):
    _check_axis(a, axis)
    return np.asarray(a.sum(axis=axis))


def _mean_fwd(a, axis):
    _check_axis(a, axis)
    return np.asarray(a.mean(axis=axis))


register("sum")((_sum_fwd, _reduce_vjp(False)))
register("mean")((_mean_fwd, _reduce_vjp(True)))


def _dot_fwd(a, b):
    _same_shape("dot", a, b)
    if a.ndim == 0:
        raise ShapeError("dot needs at least 1-d inputs")
    return np.asarray((a * b).sum(axis=-1))


def _dot_vjp(g, out, x, at):
    g = np.expand_dims(g, -1)
    return (g * x[1], g * x[0])


register("dot", 2)((_dot_fwd, _dot_vjp))


# ---------------------------------------------------------------------------
# graph


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None


class Node:
    """Handle to one recorded value.  Arithmetic operators record new ops."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def kind(self) -> str:
        return self.graph.nodes[self.id].kind

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.shape})"

    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.graph.const(np.full(self.shape, float(other)))

    def __add__(self, other):
        return self.graph.op("add", self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.op("subtract", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.op("subtract", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.op("multiply", self, other)
        return self.graph.op("scale", self, c=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return self.graph.op("divide", self, other)
        return self.graph.op("scale", self, c=1.0 / float(other))

    def __neg__(self):
        return self.graph.op("scale", self, c=-1.0)

    def __matmul__(self, other):
        return self.graph.op("matmul", self, other)

    @property
    def T(self):
        return self.graph.op("transpose", self)


class Graph:
    """Append-only record of tensor operations.

    Leaves are either named parameters (which receive gradients) or constants.
    Requesting the same parameter name twice returns the same node, so a
    weight shared between two branches accumulates both contributions.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Record] = []
        self.params: dict[str, int] = {}
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def _append(self, rec: _Record) -> Node:
        self.nodes.append(rec)
        return Node(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Node:
        if name in self.params:
            return Node(self, self.params[name])
        value = np.array(value, dtype=np.float64)
        node = self._append(_Record("param", (), {}, value, name))
        self.params[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._append(_Record("const", (), {}, np.array(value, dtype=np.float64)))

    def op(self, kind: str, *inputs: Node, **attrs) -> Node:
        return forward_op(self, kind, inputs, **attrs)

    def value_of(self, node: Node) -> np.ndarray:
        return self.nodes[node.id].value

    def replay(self, overrides: dict[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-evaluate every node, substituting parameter values from ``overrides``."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for rec in self.nodes:
            if rec.kind in ("param", "const"):
                if rec.name is not None and rec.name in overrides:
                    values.append(np.asarray(overrides[rec.name], dtype=np.float64))
                else:
                    values.append(rec.value)
                continue
            args = [values[i] for i in rec.inputs]
            values.append(np.asarray(OPS[rec.kind].forward(*args, **rec.attrs), dtype=np.float64))
        return values


def forward_op(graph: Graph, kind: str, inputs, **attrs) -> Node:
    if kind not in OPS:
        raise ContractError(f"unknown op kind {kind!r}")
    opdef = OPS[kind]
    inputs = tuple(inputs)
    if opdef.arity is not None and len(inputs) != opdef.arity:
        raise ContractError(f"{kind} takes {opdef.arity} inputs, got {len(inputs)}")
    for x in inputs:
        if x.graph is not graph:
            raise ContractError("input node belongs to a different graph")
    args = [graph.nodes[x.id].value for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = np.asarray(opdef.forward(*args, **attrs), dtype=np.float64)
    if graph.check_finite and not np.all(np.isfinite(out)):
        raise NumericError(f"{kind} produced non-finite values")
    return graph._append(_Record(kind, tuple(x.id for x in inputs), attrs, out))


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every parameter of ``graph``."""
    if loss.graph is not graph:
        raise ContractError("loss node belongs to a different graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    nodes = graph.nodes
    for i in range(loss.id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        rec = nodes[i]
        if not rec.inputs:
            continue
        xs = [nodes[j].value for j in rec.inputs]
        in_grads = OPS[rec.kind].vjp(g, rec.value, xs, rec.attrs)
        for j, gj in zip(rec.inputs, in_grads):
            if gj is None:
                continue
            gj = np.asarray(gj, dtype=np.float64).reshape(nodes[j].value.shape)
            # out-of-place: a vjp may hand the same array to several inputs
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for name, nid in graph.params.items():
        g = grads[nid] if nid < len(grads) else None
        out[name] = np.zeros_like(nodes[nid].value) if g is None else g
    return out


def grad_check(
    graph: Graph,
    loss: Node,
    param: str,
    h: float = 1e-6,
    coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``coords`` limits the check to that many coordinates chosen by a seeded
    stream; ``None`` checks every coordinate.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    analytic = backward(graph, loss)[param]
    base = graph.nodes[graph.params[param]].value
    flat_idx = np.arange(base.size)
    if coords is not None and coords < base.size:
        flat_idx = np.sort(RngStream(seed, base.size).permutation(base.size)[:coords])
    worst = 0.0
    for k in flat_idx:
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[k] += h
        minus[k] -= h
        fp = float(graph.replay({param: plus.reshape(base.shape)})[loss.id])
        fm = float(graph.replay({param: minus.reshape(base.shape)})[loss.id])
        fd = (fp - fm) / (2.0 * h)
        err = abs(analytic.reshape(-1)[k] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


def grad_check_all(graph: Graph, loss: Node, h: float = 1e-6, coords: int | None = 8, seed: int = 0):
    """Per-parameter worst relative error over every parameter of ``graph``."""
    return {
        name: grad_check(graph, loss, name, h=h, coords=coords, seed=seed + i)
        for i, name in enumerate(graph.params)
    }


# ---------------------------------------------------------------------------
# thin functional wrappers used by the model code


def matmul(a, b):
    return a.graph.op("matmul", a, b)


def concat(*xs):
    return xs[0].graph.op("concat", *xs)


def slice_(a, start, stop, axis=-1):
    axis = axis % a.value.ndim
    return a.graph.op("slice", a, axis=axis, start=start, stop=stop)


def reshape(a, shape):
    return a.graph.op("reshape", a, shape=tuple(shape))


def row_softmax(a):
    return a.graph.op("row_softmax", a)


def col_softmax(a):
    return a.graph.op("col_softmax", a)


def relu(a):
    return a.graph.op("relu", a)


def sigmoid(a):
    return a.graph.op("sigmoid", a)


def l2_normalize(a):
    return a.graph.op("l2_normalize", a)


def sum_(a, axis=None):
    return a.graph.op("sum", a, axis=axis)


def mean(a, axis=None):
    return a.graph.op("mean", a, axis=axis)


def abs_(a):
    return a.graph.op("abs", a)


def log(a):
    return a.graph.op("log", a)


def dot(a, b):
    return a.graph.op("dot", a, b)


def softplus(a):
    return a.graph.op("softplus", a)


def clamp(a, lo, hi):
    return a.graph.op("clamp", a, lo=float(lo), hi=float(hi))


def sqrt(a):
    return a.graph.op("sqrt", a)


def atan2(y, x):
    return y.graph.op("atan2", y, x)


def linear(g: Graph, params: dict, prefix: str, x: Node) -> Node:
    """``x @ W + b`` with parameters ``prefix.W`` (in x out) and ``prefix.b`` (1 x out)."""
    W = g.param(f"{prefix}.W", params[f"{prefix}.W"])
    b = g.param(f"{prefix}.b", params[f"{prefix}.b"])
    return g.op("add_row", x @ W, b)


def mlp(g: Graph, params: dict, prefix: str, x: Node, depth: int) -> Node:
    """``depth`` hidden relu layers followed by a linear output layer."""
    for i in range(depth):
        x = relu(linear(g, params, f"{prefix}.{i}", x))
    return linear(g, params, f"{prefix}.out", x)


def init_linear(params: dict, rng: RngStream, prefix: str, fan_in: int, fan_out: int) -> None:
    params[f"{prefix}.W"] = init_uniform(rng, fan_in, (fan_in, fan_out))
    params[f"{prefix}.b"] = init_uniform(rng, fan_in, (1, fan_out))


def init_mlp(params: dict, rng: RngStream, prefix: str, fan_in: int, width: int, fan_out: int, depth: int):
    d = fan_in
    for i in range(depth):
        init_linear(params, rng, f"{prefix}.{i}", d, width)
        d = width
    init_linear(params, rng, f"{prefix}.out", d, fan_out)
