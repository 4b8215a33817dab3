"""Minimal dense-tensor graph with reverse-mode gradients.

Everything is float64. A :class:`Graph` is an append-only tape of op records;
building an op evaluates it eagerly, ``forward_ops`` replays the whole tape
(pure re-evaluation, bit-identical), and ``backward`` runs one reverse sweep
accumulating vector-Jacobian products into the registered parameter nodes.

The op set is closed: add, mul, matmul, affine, softmax, log_softmax,
layer_norm, gelu, relu, gather, sum, mean, scale, concat, log. There is no
general-purpose autodiff beyond these ops; the bounded surface is what makes
exhaustive finite-difference coverage feasible.

add/mul support numpy broadcasting (gradients are reduce-summed back onto
the operand shapes); softmax and log_softmax act on the last axis with
max-subtraction; sum/mean reduce to a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "GraphError",
    "OpShapeError",
    "forward_ops",
    "backward",
    "finite_difference_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN_EPS = 1e-6  # layer_norm variance floor


class GraphError(Exception):
    pass


class OpShapeError(GraphError):
    """Shape mismatch; carries the op name and the offending shapes."""

    def __init__(self, op: str, shapes) -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


@dataclass(frozen=True)
class Tensor:
    """A dense float64 value: shape plus row-major data."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _as_f64(self.data))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)


@dataclass
class Node:
    """One tape record: op kind, input node ids, and the computed value."""

    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class Graph:
    """Append-only op tape. Nodes reference strictly earlier nodes."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.param_ids: set[int] = set()
        self.output_id: int | None = None

    # ---- leaves ----------------------------------------------------------

    def input(self, value) -> Node:
        return self._append("input", (), _as_f64(value))

    def param(self, value) -> Node:
        node = self._append("param", (), _as_f64(value))
        self.param_ids.add(node.id)
        return node

    def set_output(self, node: Node) -> None:
        self.output_id = node.id

    # ---- ops -------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        try:
            value = a.value + b.value
        except ValueError:
            raise OpShapeError("add", (a.shape, b.shape)) from None
        return self._append("add", (a.id, b.id), value)

    def mul(self, a: Node, b: Node) -> Node:
        try:
            value = a.value * b.value
        except ValueError:
            raise OpShapeError("mul", (a.shape, b.shape)) from None
        return self._append("mul", (a.id, b.id), value)

    def matmul(self, a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise OpShapeError("matmul", (a.shape, b.shape))
        av = a.value.T if transpose_a else a.value
        bv = b.value.T if transpose_b else b.value
        if av.shape[1] != bv.shape[0]:
            raise OpShapeError("matmul", (a.shape, b.shape))
        return self._append(
            "matmul", (a.id, b.id), av @ bv, ctx={"ta": transpose_a, "tb": transpose_b}
        )

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        if x.value.ndim != 2 or w.value.ndim != 2 or b.value.ndim != 1:
            raise OpShapeError("affine", (x.shape, w.shape, b.shape))
        if x.value.shape[1] != w.value.shape[0] or w.value.shape[1] != b.value.shape[0]:
            raise OpShapeError("affine", (x.shape, w.shape, b.shape))
        return self._append("affine", (x.id, w.id, b.id), x.value @ w.value + b.value)

    def softmax(self, x: Node) -> Node:
        return self._append("softmax", (x.id,), _softmax_last(x.value))

    def log_softmax(self, x: Node) -> Node:
        return self._append("log_softmax", (x.id,), _log_softmax_last(x.value))

    def layer_norm(self, x: Node, gain: Node, bias: Node) -> Node:
        if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
            raise OpShapeError("layer_norm", (x.shape, gain.shape, bias.shape))
        mu = x.value.mean(axis=-1, keepdims=True)
        var = ((x.value - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (x.value - mu) / np.sqrt(var + _LN_EPS)
        return self._append("layer_norm", (x.id, gain.id, bias.id), xhat * gain.value + bias.value)

    def gelu(self, x: Node) -> Node:
        value = 0.5 * x.value * (1.0 + erf(x.value * _INV_SQRT2))
        return self._append("gelu", (x.id,), value)

    def relu(self, x: Node) -> Node:
        return self._append("relu", (x.id,), np.maximum(x.value, 0.0))

    def gather(self, table: Node, indices) -> Node:
        if table.value.ndim != 2:
            raise OpShapeError("gather", (table.shape,))
        idx = np.asarray(indices, dtype=np.intp)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
            raise GraphError(f"gather: indices out of range for table {table.shape}")
        return self._append("gather", (table.id,), table.value[idx], ctx={"idx": idx.copy()})

    def sum(self, x: Node) -> Node:
        return self._append("sum", (x.id,), np.asarray(x.value.sum()))

    def mean(self, x: Node) -> Node:
        return self._append("mean", (x.id,), np.asarray(x.value.mean()))

    def scale(self, x: Node, factor: float) -> Node:
        return self._append("scale", (x.id,), x.value * float(factor), ctx={"factor": float(factor)})

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        if not parts:
            raise GraphError("concat: empty part list")
        try:
            value = np.concatenate([p.value for p in parts], axis=axis)
        except ValueError:
            raise OpShapeError("concat", tuple(p.shape for p in parts)) from None
        return self._append("concat", tuple(p.id for p in parts), value, ctx={"axis": axis})

    def log(self, x: Node) -> Node:
        if (x.value <= 0.0).any():
            raise GraphError("log: nonpositive input")
        return self._append("log", (x.id,), np.log(x.value))

    # ---- internals ---------------------------------------------------------

    def _append(self, op: str, inputs: tuple[int, ...], value: np.ndarray, ctx: dict | None = None) -> Node:
        node = Node(len(self.nodes), op, inputs, _as_f64(value), ctx or {})
        self.nodes.append(node)
        self.output_id = node.id
        return node


def _eval_op(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    ins = [vals[i] for i in node.inputs]
    if op in ("input", "param"):
        return node.value
    if op == "add":
        return ins[0] + ins[1]
    if op == "mul":
        return ins[0] * ins[1]
    if op == "matmul":
        a = ins[0].T if node.ctx["ta"] else ins[0]
        b = ins[1].T if node.ctx["tb"] else ins[1]
        return a @ b
    if op == "affine":
        return ins[0] @ ins[1] + ins[2]
    if op == "softmax":
        return _softmax_last(ins[0])
    if op == "log_softmax":
        return _log_softmax_last(ins[0])
    if op == "layer_norm":
        mu = ins[0].mean(axis=-1, keepdims=True)
        var = ((ins[0] - mu) ** 2).mean(axis=-1, keepdims=True)
        return (ins[0] - mu) / np.sqrt(var + _LN_EPS) * ins[1] + ins[2]
    if op == "gelu":
        return 0.5 * ins[0] * (1.0 + erf(ins[0] * _INV_SQRT2))
    if op == "relu":
        return np.maximum(ins[0], 0.0)
    if op == "gather":
        return ins[0][node.ctx["idx"]]
    if op == "sum":
        return np.asarray(ins[0].sum())
    if op == "mean":
        return np.asarray(ins[0].mean())
    if op == "scale":
        return ins[0] * node.ctx["factor"]
    if op == "concat":
        return np.concatenate(ins, axis=node.ctx["axis"])
    if op == "log":
        return np.log(ins[0])
    raise GraphError(f"unknown op {op!r}")


def forward_ops(graph: Graph) -> Tensor:
    """Re-evaluate the whole tape from its leaves; returns the output value."""
    if graph.output_id is None:
        raise GraphError("graph has no output node")
    vals: list[np.ndarray] = []
    for node in graph.nodes:
        vals.append(_eval_op(node, vals))
    return Tensor(vals[graph.output_id])


def backward(graph: Graph, output_id: int | None = None) -> dict[int, Tensor]:
    """Reverse sweep from a scalar output; returns grads per parameter id.

    Parameters with no path to the output get zero gradients.
    """
    out = graph.output_id if output_id is None else output_id
    if out is None:
        raise GraphError("graph has no output node")
    out_node = graph.nodes[out]
    if out_node.value.ndim != 0:
        raise GraphError(f"backward: output must be scalar, got shape {out_node.shape}")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[out] = np.ones(())

    def accum(node_id: int, g: np.ndarray) -> None:
        if grads[node_id] is None:
            grads[node_id] = g.copy()
        else:
            grads[node_id] = grads[node_id] + g

    for node in reversed(graph.nodes[: out + 1]):
        g = grads[node.id]
        if g is None or node.op in ("input", "param"):
            continue
        ins = [graph.nodes[i] for i in node.inputs]
        op = node.op
        if op == "add":
            accum(ins[0].id, _unbroadcast(g, ins[0].shape))
            accum(ins[1].id, _unbroadcast(g, ins[1].shape))
        elif op == "mul":
            accum(ins[0].id, _unbroadcast(g * ins[1].value, ins[0].shape))
            accum(ins[1].id, _unbroadcast(g * ins[0].value, ins[1].shape))
        elif op == "matmul":
            ta, tb = node.ctx["ta"], node.ctx["tb"]
            a = ins[0].value.T if ta else ins[0].value
            b = ins[1].value.T if tb else ins[1].value
            ga = g @ b.T
            gb = a.T @ g
            accum(ins[0].id, ga.T if ta else ga)
            accum(ins[1].id, gb.T if tb else gb)
        elif op == "affine":
            x, w = ins[0].value, ins[1].value
            accum(ins[0].id, g @ w.T)
            accum(ins[1].id, x.T @ g)
            accum(ins[2].id, g.sum(axis=0))
        elif op == "softmax":
            y = node.value
            accum(ins[0].id, (g - (g * y).sum(axis=-1, keepdims=True)) * y)
        elif op == "log_softmax":
            y = np.exp(node.value)
            accum(ins[0].id, g - y * g.sum(axis=-1, keepdims=True))
        elif op == "layer_norm":
            x, gain = ins[0].value, ins[1].value
            mu = x.mean(axis=-1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + _LN_EPS)
            xhat = (x - mu) * inv
            gy = g * gain
            gx = (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) * inv
            accum(ins[0].id, gx)
            accum(ins[1].id, _unbroadcast(g * xhat, ins[1].shape))
            accum(ins[2].id, _unbroadcast(g, ins[2].shape))
        elif op == "gelu":
            x = ins[0].value
            d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
            accum(ins[0].id, g * d)
        elif op == "relu":
            accum(ins[0].id, g * (ins[0].value > 0.0))
        elif op == "gather":
            gt = np.zeros_like(ins[0].value)
            np.add.at(gt, node.ctx["idx"], g)
            accum(ins[0].id, gt)
        elif op == "sum":
            accum(ins[0].id, np.broadcast_to(g, ins[0].shape).copy())
        elif op == "mean":
            accum(ins[0].id, np.broadcast_to(g / ins[0].value.size, ins[0].shape).copy())
        elif op == "scale":
            accum(ins[0].id, g * node.ctx["factor"])
        elif op == "concat":
            axis = node.ctx["axis"]
            offset = 0
            for child in ins:
                n = child.shape[axis]
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                accum(child.id, g[tuple(sl)])
                offset += n
        elif op == "log":
            accum(ins[0].id, g / ins[0].value)
        else:
            raise GraphError(f"unknown op {op!r}")

    result = {}
    for pid in graph.param_ids:
        g = grads[pid]
        result[pid] = Tensor(np.zeros(graph.nodes[pid].shape) if g is None else g)
    return result


def finite_difference_check(loss_fn, params: dict, eps: float = 1e-5, coords: int = 64, seed: int = 0) -> float:
    """Max relative error of analytic grads vs central differences.

    ``loss_fn(params)`` must return ``(loss_value, grads)`` where ``grads``
    maps each parameter name to an array shaped like the parameter. Up to
    ``coords`` coordinates are sampled across the whole parameter space;
    the error at each is |analytic - fd| / max(1, |analytic|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = int(np.sum(sizes)) if names else 0
    if total == 0:
        return 0.0

    _, grads = loss_fn(params)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    picks = rng.choice(total, size=min(coords, total), replace=False)

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in sorted(int(p) for p in picks):
        which = int(np.searchsorted(bounds, flat, side="right") - 1)
        name = names[which]
        local = flat - bounds[which]
        idx = np.unravel_index(local, params[name].shape)

        perturbed = {n: a.copy() for n, a in params.items()}
        perturbed[name][idx] += eps
        hi, _ = loss_fn(perturbed)
        perturbed[name][idx] -= 2 * eps
        lo, _ = loss_fn(perturbed)

        fd = (hi - lo) / (2 * eps)
        analytic = float(grads[name][idx])
        err = abs(analytic - fd) / max(1.0, abs(analytic))
        worst = max(worst, err)
    return worst
