"""Dense float64 tensors on an append-only tape, with reverse-mode gradients
and a forward-mode JVP whose tangent stays differentiable.

The tape (`Graph`) is rebuilt for every loss evaluation.  Forward-mode
tangents are propagated dual-number style in the same pass, but each tangent
is itself expressed through recorded primitives, so a later `backward` through
a function of the tangent (e.g. its squared norm) reaches the parameters.
Broadcasting is deliberately restricted: operands must have equal shapes, or
the smaller one must be a scalar or match the other's trailing dimensions
(one leading batch axis dropped).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes not compatible under the restricted broadcasting rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(op: str, data: np.ndarray) -> None:
    # A full-array reduction: any NaN/inf poisons the sum.  Cheaper than
    # isfinite().all() and exact for the magnitudes this library sees.
    if not np.isfinite(data.sum()):
        raise NonFiniteError(f"{op}: non-finite output")


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple[int, ...], vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp  # grad_out -> iterable of (input_id, grad) or None for leaves


class Graph:
    """Append-only computation tape.

    Node inputs always precede the node itself, so the list order is a valid
    topological order and one reversed sweep implements backpropagation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tangents: dict[int, "Tensor"] = {}
        self._fwd_depth = 0
        self._leaf_cache: dict[tuple[int, str], "Tensor"] = {}

    def _emit(self, op: str, data: np.ndarray, inputs: tuple[int, ...], vjp) -> "Tensor":
        nid = len(self.nodes)
        self.nodes.append(_Node(op, inputs, vjp))
        return Tensor(data, self, nid)

    def leaf(self, value) -> "Tensor":
        """Record an input tensor.  Gradients accumulate at its node id."""
        data = _as_array(value)
        _check_finite("leaf", data)
        return self._emit("leaf", data, (), None)

    # Constants are leaves too; the name only documents intent at call sites.
    constant = leaf

    def tangent_of(self, t: "Tensor") -> "Tensor | None":
        if t.graph is not self:
            return None
        return self._tangents.get(t.nid)

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root; returns node id -> gradient."""
        if root.graph is not self:
            raise ValueError("backward: root does not belong to this graph")
        if root.data.shape != ():
            raise ShapeError(
                f"backward: root must be a scalar, got shape {root.data.shape}"
            )
        grads: dict[int, np.ndarray] = {root.nid: np.ones(())}
        for nid in range(root.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for iid, contrib in node.vjp(g):
                prev = grads.get(iid)
                grads[iid] = contrib if prev is None else prev + contrib
        return grads


class Tensor:
    """A float64 array, optionally bound to a node of a Graph."""

    __slots__ = ("data", "graph", "nid")

    def __init__(self, data, graph: Graph | None = None, nid: int | None = None):
        self.data = _as_array(data)
        self.graph = graph
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "traced" if self.graph is not None else "const"
        return f"Tensor({tag}, shape={self.data.shape})"

    # Arithmetic sugar; all routed through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, float(other), 0.0)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _common_graph(op: str, tensors: Iterable[Tensor]) -> Graph | None:
    g = None
    for t in tensors:
        if t.graph is None:
            continue
        if g is None:
            g = t.graph
        elif g is not t.graph:
            raise ValueError(f"{op}: operands belong to different graphs")
    return g


def _ids(tensors: Iterable[Tensor]) -> tuple[int, ...]:
    return tuple(t.nid for t in tensors if t.graph is not None)


class _suspend_forward:
    """Tangent-rule arithmetic must not spawn tangents of its own."""

    def __init__(self, graph: Graph):
        self.graph = graph

    def __enter__(self):
        self.graph._fwd_depth -= 1

    def __exit__(self, *exc):
        self.graph._fwd_depth += 1


def _result(op, data, operands, vjp, tangent_rule):
    """Record an op, then propagate a forward-mode tangent if one is live.

    `tangent_rule` receives the operand tangents (Tensor or None, meaning a
    zero tangent) and must build the output tangent out of recorded
    primitives, so the tangent itself remains differentiable.
    """
    _check_finite(op, data)
    g = _common_graph(op, operands)
    if g is None:
        return Tensor(data)
    out = g._emit(op, data, _ids(operands), vjp)
    if g._fwd_depth > 0 and tangent_rule is not None:
        tans = [g.tangent_of(t) for t in operands]
        if any(t is not None for t in tans):
            with _suspend_forward(g):
                tan = tangent_rule(out, *tans)
            if tan is not None:
                g._tangents[out.nid] = tan
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (leading batch axis only)
# ---------------------------------------------------------------------------


def _reduce_mode(big: tuple[int, ...], small: tuple[int, ...], op: str) -> str:
    """How `small` was broadcast against `big`: '', 'lead' or 'all'."""
    if big == small:
        return ""
    if small == ():
        return "all"
    if len(small) == len(big) - 1 and small == big[1:]:
        return "lead"
    raise ShapeError(f"{op}: shape mismatch {big} vs {small}")


def _pair_modes(a: Tensor, b: Tensor, op: str) -> tuple[tuple[int, ...], str, str]:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return sa, "", ""
    if len(sa) >= len(sb):
        return sa, "", _reduce_mode(sa, sb, op)
    return sb, _reduce_mode(sb, sa, op), ""


def _reduce_grad(grad: np.ndarray, mode: str, shape: tuple[int, ...]) -> np.ndarray:
    if mode == "":
        return grad
    if mode == "all":
        return np.asarray(grad.sum())
    return grad.sum(axis=0)  # 'lead'


def _zeros_like_tensor(g: Graph, t: Tensor) -> Tensor:
    return g.constant(np.zeros_like(t.data))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _, ma, mb = _pair_modes(a, b, "add")
    data = a.data + b.data

    def vjp(g):
        out = []
        if a.graph is not None:
            out.append((a.nid, _reduce_grad(g, ma, a.shape)))
        if b.graph is not None:
            out.append((b.nid, _reduce_grad(g, mb, b.shape)))
        return out

    def tangent(out, da, db):
        if da is None:
            return db
        if db is None:
            return da
        return add(da, db)

    return _result("add", data, (a, b), vjp, tangent)


def sub(a, b) -> Tensor:
    return add(a, affine(_coerce(b), -1.0, 0.0))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _, ma, mb = _pair_modes(a, b, "multiply")
    data = a.data * b.data

    def vjp(g):
        out = []
        if a.graph is not None:
            out.append((a.nid, _reduce_grad(g * b.data, ma, a.shape)))
        if b.graph is not None:
            out.append((b.nid, _reduce_grad(g * a.data, mb, b.shape)))
        return out

    def tangent(out, da, db):
        parts = []
        if da is not None:
            parts.append(mul(da, b))
        if db is not None:
            parts.append(mul(a, db))
        return parts[0] if len(parts) == 1 else add(*parts)

    return _result("multiply", data, (a, b), vjp, tangent)


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with python-float coefficients."""
    a = _coerce(a)
    scale = float(scale)
    data = a.data * scale + shift if shift != 0.0 else a.data * scale

    def vjp(g):
        return [(a.nid, g * scale)] if a.graph is not None else []

    def tangent(out, da):
        return affine(da, scale, 0.0)

    return _result("scale", data, (a,), vjp, tangent)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        out = []
        if a.graph is not None:
            out.append((a.nid, g @ b.data.T))
        if b.graph is not None:
            out.append((b.nid, a.data.T @ g))
        return out

    def tangent(out, da, db):
        parts = []
        if da is not None:
            parts.append(matmul(da, b))
        if db is not None:
            parts.append(matmul(a, db))
        return parts[0] if len(parts) == 1 else add(*parts)

    return _result("matmul", data, (a, b), vjp, tangent)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [_coerce(p) for p in parts]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].data.ndim
    ax = axis % nd if nd else 0
    try:
        data = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.graph is not None:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                out.append((t.nid, g[tuple(idx)]))
        return out

    def tangent(out, *tans):
        g = out.graph
        filled = [
            tan if tan is not None else _zeros_like_tensor(g, t)
            for t, tan in zip(ts, tans)
        ]
        return concat(filled, axis=ax)

    return _result("concat", data, tuple(ts), vjp, tangent)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _coerce(a)
    nd = a.data.ndim
    ax = axis % nd
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"split: bad range [{start}:{stop}] on shape {a.shape}")
    idx = [slice(None)] * nd
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    data = a.data[idx]

    def vjp(g):
        if a.graph is None:
            return []
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a.nid, full)]

    def tangent(out, da):
        return slice_axis(da, start, stop, axis=ax)

    return _result("split", data, (a,), vjp, tangent)


def split(a, sizes: Sequence[int], axis: int = -1) -> tuple[Tensor, ...]:
    a = _coerce(a)
    ax = axis % a.data.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {tuple(sizes)} do not cover axis of {a.shape}")
    outs, lo = [], 0
    for s in sizes:
        outs.append(slice_axis(a, lo, lo + s, axis=ax))
        lo += s
    return tuple(outs)


def _reduce(op: str, a, axis, np_fn, scale_back: Callable[[np.ndarray], float]):
    a = _coerce(a)
    data = np_fn(a.data, axis)
    shape = a.data.shape

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, expand(g) * scale_back(a.data))]

    return a, data, vjp, expand


def tsum(a, axis: int | None = None) -> Tensor:
    a, data, vjp, _ = _reduce("sum", a, axis, lambda d, ax: d.sum(axis=ax), lambda d: 1.0)

    def tangent(out, da):
        return tsum(da, axis=axis)

    return _result("sum", data, (a,), vjp, tangent)


def tmean(a, axis: int | None = None) -> Tensor:
    a = _coerce(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape)

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, expand(g) / count)]

    def tangent(out, da):
        return tmean(da, axis=axis)

    return _result("mean", data, (a,), vjp, tangent)


def sumsq(a, axis: int | None = None) -> Tensor:
    """Squared L2 norm: sum of squares over `axis` (default: all elements)."""
    a = _coerce(a)
    data = (a.data * a.data).sum(axis=axis)

    def expand(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape)

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, 2.0 * a.data * expand(g))]

    def tangent(out, da):
        return affine(tsum(mul(a, da), axis=axis), 2.0, 0.0)

    return _result("sqnorm", data, (a,), vjp, tangent)


def _elementwise(op, a, fn, grad_local, tangent_builder):
    a = _coerce(a)
    data = fn(a.data)

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, g * grad_local(a.data, data))]

    def tangent(out, da):
        return tangent_builder(a, out, da)

    return _result(op, data, (a,), vjp, tangent)


def texp(a) -> Tensor:
    return _elementwise(
        "exp", a, np.exp, lambda x, y: y, lambda a_, out, da: mul(out, da)
    )


def reciprocal(a) -> Tensor:
    return _elementwise(
        "reciprocal",
        a,
        lambda x: 1.0 / x,
        lambda x, y: -y * y,
        lambda a_, out, da: affine(mul(mul(out, out), da), -1.0, 0.0),
    )


def tlog(a) -> Tensor:
    return _elementwise(
        "log",
        a,
        np.log,
        lambda x, y: 1.0 / x,
        lambda a_, out, da: mul(reciprocal(a_), da),
    )


def ttanh(a) -> Tensor:
    return _elementwise(
        "tanh",
        a,
        np.tanh,
        lambda x, y: 1.0 - y * y,
        lambda a_, out, da: mul(da, affine(mul(out, out), -1.0, 1.0)),
    )


def sigmoid(a) -> Tensor:
    return _elementwise(
        "sigmoid",
        a,
        expit,
        lambda x, y: y * (1.0 - y),
        lambda a_, out, da: mul(da, mul(out, affine(out, -1.0, 1.0))),
    )


def silu(a) -> Tensor:
    a = _coerce(a)
    s = expit(a.data)
    data = a.data * s

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, g * (s * (1.0 + a.data * (1.0 - s))))]

    def tangent(out, da):
        sg = sigmoid(a)
        inner = affine(mul(a, affine(sg, -1.0, 1.0)), 1.0, 1.0)
        return mul(da, mul(sg, inner))

    return _result("silu", data, (a,), vjp, tangent)


def tsin(a) -> Tensor:
    return _elementwise(
        "sin",
        a,
        np.sin,
        lambda x, y: np.cos(x),
        lambda a_, out, da: mul(da, tcos(a_)),
    )


def tcos(a) -> Tensor:
    return _elementwise(
        "cos",
        a,
        np.cos,
        lambda x, y: -np.sin(x),
        lambda a_, out, da: mul(da, affine(tsin(a_), -1.0, 0.0)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)

    def vjp(g):
        if a.graph is None:
            return []
        return [(a.nid, g * mask)]

    def tangent(out, da):
        return mul(da, out.graph.constant(mask))

    return _result("clip", data, (a,), vjp, tangent)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": mul,
    "scale": affine,
    "concatenate": concat,
    "split": split,
    "sum": tsum,
    "mean": tmean,
    "exp": texp,
    "log": tlog,
    "tanh": ttanh,
    "silu": silu,
    "sigmoid": sigmoid,
    "sin": tsin,
    "cos": tcos,
    "sqnorm": sumsq,
    "clip": clip,
}


def forward_primitives(kind: str, *inputs, **kwargs):
    """Dispatch an op by name; the kinds cover the documented primitive set."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind: {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable arrays with matching gradient accumulators."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name: {name!r}")
        arr = _as_array(value).copy()
        _check_finite(f"param {name}", arr)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = _as_array(value)
        if arr.shape != self._values[name].shape:
            raise ShapeError(
                f"param {name}: shape {arr.shape} != {self._values[name].shape}"
            )
        self._values[name] = arr.copy()

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def leaf(self, graph: Graph, name: str) -> Tensor:
        """Trace this parameter on `graph`, memoized per (store, name)."""
        key = (id(self), name)
        t = graph._leaf_cache.get(key)
        if t is None:
            t = graph.leaf(self._values[name])
            graph._leaf_cache[key] = t
        return t

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._values.values()]) if self._values else np.zeros(0)

    def from_vector(self, vec: np.ndarray) -> None:
        lo = 0
        for name, v in self._values.items():
            hi = lo + v.size
            self._values[name] = vec[lo:hi].reshape(v.shape).copy()
            lo = hi
        if lo != vec.size:
            raise ShapeError("from_vector: size mismatch")

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self._grads.values()]) if self._grads else np.zeros(0)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self._values.items():
            other.add(name, v)
        return other


def backward(graph: Graph, root: Tensor, params: ParamStore | Sequence[ParamStore]) -> None:
    """Accumulate d(root)/d(p) into the gradient slot of every parameter.

    Parameters that were never traced on `graph`, or that root does not
    depend on, receive a zero contribution.
    """
    grads = graph.backward(root)
    stores = [params] if isinstance(params, ParamStore) else list(params)
    for store in stores:
        for name in store.names():
            leaf = graph._leaf_cache.get((id(store), name))
            if leaf is None:
                continue
            g = grads.get(leaf.nid)
            if g is not None:
                store._grads[name] += g


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


def jvp(f: Callable, primals: Sequence[Tensor], tangents: Sequence) -> tuple[Tensor, Tensor]:
    """Trace `f` at `primals`, pushing `tangents` through as dual parts.

    Returns (value, J @ tangent).  Both outputs are nodes of the same graph,
    so reverse mode through either (including the tangent's squared norm)
    reaches every parameter used inside `f`.
    """
    primals = list(primals)
    if not primals:
        raise ValueError("jvp: no primal inputs")
    g = _common_graph("jvp", primals)
    if g is None:
        raise ValueError("jvp: primal inputs must be traced on a graph")
    if len(primals) != len(tangents):
        raise ShapeError("jvp: tangent count does not match primal count")
    tans: list[Tensor] = []
    for p, t in zip(primals, tangents):
        tt = t if isinstance(t, Tensor) else g.constant(t)
        if tt.graph is None:
            tt = g.constant(tt.data)
        if tt.data.shape != p.data.shape:
            raise ShapeError(
                f"jvp: tangent shape {tt.data.shape} != primal shape {p.data.shape}"
            )
        tans.append(tt)

    saved = g._tangents
    g._tangents = {p.nid: t for p, t in zip(primals, tans)}
    g._fwd_depth += 1
    try:
        out = f(*primals)
        tan_out = g._tangents.get(out.nid)
    finally:
        g._fwd_depth -= 1
        g._tangents = saved
    if tan_out is None:
        tan_out = g.constant(np.zeros_like(out.data))
    return out, tan_out
