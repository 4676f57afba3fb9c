"""Dense 2-D tensors with reverse-mode autodiff.

Every tensor is a float64 matrix. Tensors created through :meth:`Graph.variable`
(or produced by an op with at least one graph input) carry a node id in that
graph; everything else is a plain value.

Backward rules are written with the same tensor ops used in the forward pass.
With ``emit_graph=True`` they run on the graph itself, so the returned
gradients are graph nodes and can be differentiated again. This is what lets
an outer loss see through unrolled SGD updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor failures."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        super().__init__(msg + (f": {detail}" if detail else ""))


class DomainError(TensorError):
    pass


class GraphError(TensorError):
    pass


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    inputs: tuple["Tensor", ...] = ()
    vjp: Callable | None = None
    attrs: dict = field(default_factory=dict)


class Graph:
    """Append-only computation graph. Confined to a single thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.roots: list[int] = []

    def variable(self, value, name: str | None = None) -> "Tensor":
        arr = _as_matrix(value).copy()
        _check_finite("variable", arr)
        nid = len(self.nodes)
        self.nodes.append(Node("variable", (), arr, attrs={"name": name}))
        self.roots.append(nid)
        return Tensor(arr, self, nid)

    def __len__(self) -> int:
        return len(self.nodes)


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, f"shape {arr.shape}")


class Tensor:
    __slots__ = ("value", "graph", "node")
    __array_priority__ = 100

    def __init__(self, value, graph: Graph | None = None, node: int | None = None):
        self.value = value if isinstance(value, np.ndarray) and value.ndim == 2 else _as_matrix(value)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def tensor(value) -> Tensor:
    """Value-only tensor (no graph)."""
    return Tensor(_as_matrix(value).copy())


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_matrix(x))


def _record(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable, **attrs) -> Tensor:
    _check_finite(op, value)
    graph = None
    for t in inputs:
        if t.graph is not None:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise GraphError(f"op '{op}' mixes tensors from different graphs")
    if graph is None:
        return Tensor(value)
    parents = tuple(t.node for t in inputs if t.graph is not None)
    nid = len(graph.nodes)
    graph.nodes.append(Node(op, parents, value, tuple(inputs), vjp, attrs))
    return Tensor(value, graph, nid)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitive ops


def sum_to(a: Tensor, shape: tuple[int, int]) -> Tensor:
    """Sum ``a`` down to a broadcast-compatible ``shape``."""
    a = _wrap(a)
    if a.shape == tuple(shape):
        return a
    v = a.value
    if shape[0] == 1 and v.shape[0] != 1:
        v = v.sum(axis=0, keepdims=True)
    if shape[1] == 1 and v.shape[1] != 1:
        v = v.sum(axis=1, keepdims=True)
    if v.shape != tuple(shape):
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    in_shape = a.shape
    return _record("sum_to", [a], v, lambda g, ins, out: [broadcast_to(g, in_shape)])


def broadcast_to(a: Tensor, shape: tuple[int, int]) -> Tensor:
    a = _wrap(a)
    if a.shape == tuple(shape):
        return a
    try:
        v = np.ascontiguousarray(np.broadcast_to(a.value, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    in_shape = a.shape
    return _record("broadcast_to", [a], v, lambda g, ins, out: [sum_to(g, in_shape)])


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def vjp(g, ins, out):
        return [sum_to(g, ins[0].shape), sum_to(g, ins[1].shape)]

    return _record("add", [a, b], a.value + b.value, vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, ins, out):
        return [sum_to(g, ins[0].shape), scale(sum_to(g, ins[1].shape), -1.0)]

    return _record("sub", [a, b], a.value - b.value, vjp)


def mul(a, b) -> Tensor:
    """Hadamard product with 2-D broadcasting of unit dims."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, ins, out):
        x, y = ins
        return [sum_to(mul(g, y), x.shape), sum_to(mul(g, x), y.shape)]

    return _record("mul", [a, b], a.value * b.value, vjp)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0.0):
        raise DomainError("div: division by zero")

    def vjp(g, ins, out):
        x, y = ins
        gx = div(g, y)
        return [sum_to(gx, x.shape), sum_to(scale(mul(gx, out), -1.0), y.shape)]

    return _record("div", [a, b], a.value / b.value, vjp)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _record("scale", [a], a.value * c, lambda g, ins, out: [scale(g, c)], c=c)


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        v = np.exp(a.value)
    return _record("exp", [a], v, lambda g, ins, out: [mul(g, out)])


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _record("log", [a], np.log(a.value), lambda g, ins, out: [div(g, ins[0])])


def tanh(a) -> Tensor:
    a = _wrap(a)

    def vjp(g, ins, out):
        return [mul(g, sub(1.0, mul(out, out)))]

    return _record("tanh", [a], np.tanh(a.value), vjp)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("sqrt: input must be strictly positive")
    return _record("sqrt", [a], np.sqrt(a.value), lambda g, ins, out: [div(g, scale(out, 2.0))])


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient passes only where a > floor."""
    a = _wrap(a)
    mask = (a.value > floor).astype(np.float64)
    return _record(
        "clamp_min",
        [a],
        np.maximum(a.value, floor),
        lambda g, ins, out: [mul(g, Tensor(mask))],
        floor=floor,
    )


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _record("transpose", [a], np.ascontiguousarray(a.value.T), lambda g, ins, out: [transpose(g)])


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def vjp(g, ins, out):
        x, y = ins
        return [matmul(g, transpose(y)), matmul(transpose(x), g)]

    return _record("matmul", [a, b], a.value @ b.value, vjp)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum to 1x1 (axis=None), to a 1xc row (axis=0) or to an nx1 column (axis=1)."""
    a = _wrap(a)
    if axis is None:
        v = np.array([[a.value.sum()]])
    elif axis in (0, 1):
        v = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum: axis must be None, 0 or 1, got {axis}")
    in_shape = a.shape
    return _record("sum", [a], v, lambda g, ins, out: [broadcast_to(g, in_shape)], axis=axis)


def mean(a) -> Tensor:
    a = _wrap(a)
    return scale(sum(a), 1.0 / a.value.size)


def mean_rows(a) -> Tensor:
    """Average of the rows, as a 1xc row."""
    a = _wrap(a)
    return scale(sum(a, axis=0), 1.0 / a.rows)


def row_logsumexp(a) -> Tensor:
    """log(sum(exp(row))) per row, returned as an nx1 column."""
    a = _wrap(a)
    m = a.value.max(axis=1, keepdims=True)
    v = m + np.log(np.exp(a.value - m).sum(axis=1, keepdims=True))

    def vjp(g, ins, out):
        return [mul(g, exp(sub(ins[0], out)))]

    return _record("row_logsumexp", [a], v, vjp)


def frobenius_sq(a) -> Tensor:
    a = _wrap(a)
    v = np.array([[np.dot(a.value.ravel(), a.value.ravel())]])
    return _record("frobenius_sq", [a], v, lambda g, ins, out: [mul(scale(g, 2.0), ins[0])])


def take_rows(a, idx) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.rows
    return _record(
        "take_rows", [a], a.value[idx], lambda g, ins, out: [scatter_rows(g, idx, n)], idx=idx
    )


def scatter_rows(a, idx, n: int) -> Tensor:
    """Inverse of take_rows: rows of ``a`` are added into an n-row zero matrix."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    v = np.zeros((n, a.cols))
    np.add.at(v, idx, a.value)
    return _record("scatter_rows", [a], v, lambda g, ins, out: [take_rows(g, idx)], idx=idx)


# ---------------------------------------------------------------------------
# composites


def rowwise_l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||, eps).

    Implemented as a / sqrt(max(||row||^2, eps^2)), which is the same value
    and keeps the derivative finite on zero rows.
    """
    if eps <= 0:
        raise DomainError("rowwise_l2_normalize: eps must be positive")
    a = _wrap(a)
    sq = sum(mul(a, a), axis=1)
    return div(a, sqrt(clamp_min(sq, eps * eps)))


def trace(a) -> Tensor:
    a = _wrap(a)
    if a.rows != a.cols:
        raise ShapeError(f"trace: square matrix required, got {a.shape}")
    return sum(mul(a, Tensor(np.eye(a.rows))))


# ---------------------------------------------------------------------------
# reverse mode


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, emit_graph: bool = False) -> dict[int, Tensor]:
    """Reverse-mode gradients of a scalar graph node.

    Returns a map node id -> gradient for every requested target (default:
    every graph root reachable from ``loss``). With ``emit_graph`` the
    gradients are themselves nodes of ``loss.graph``.
    """
    if loss.graph is None or loss.node is None:
        raise GraphError("backward: loss is not on a graph")
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    graph = loss.graph
    nodes = graph.nodes

    if wrt is None:
        targets = list(graph.roots)
    else:
        targets = []
        for t in wrt:
            if t.graph is not graph:
                raise GraphError("backward: target tensor is not on the loss graph")
            targets.append(t.node)
    target_set = set(targets)

    # nodes whose value depends on some target; gradients only flow into these
    live = bytearray(loss.node + 1)
    for nid in range(loss.node + 1):
        if nid in target_set or any(live[p] for p in nodes[nid].parents if p <= loss.node):
            live[nid] = 1

    grads: dict[int, Tensor] = {}
    seed = Tensor(np.ones((1, 1)))
    grads[loss.node] = seed
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None or not live[nid]:
            continue
        node = nodes[nid]
        if node.vjp is None:
            continue
        if not any(live[p] for p in node.parents):
            continue
        if emit_graph:
            ins = node.inputs
            out = Tensor(node.value, graph, nid)
        else:
            ins = tuple(t.detach() for t in node.inputs)
            out = Tensor(node.value)
            g = g.detach()
        parts = node.vjp(g, ins, out)
        for t, gp in zip(node.inputs, parts):
            if t.graph is None or gp is None or not live[t.node]:
                continue
            prev = grads.get(t.node)
            grads[t.node] = gp if prev is None else add(prev, gp)
    result = {}
    for nid in targets:
        gv = grads.get(nid)
        if gv is None:
            gv = Tensor(np.zeros_like(nodes[nid].value))
        elif not emit_graph:
            gv = gv.detach()
        result[nid] = gv
    return result


def grad(loss: Tensor, wrt: Sequence[Tensor], emit_graph: bool = False) -> list[Tensor]:
    """Gradients of ``loss`` w.r.t. each tensor in ``wrt``, in order."""
    wrt = list(wrt)
    gmap = backward(loss, wrt, emit_graph=emit_graph)
    return [gmap[t.node] for t in wrt]
