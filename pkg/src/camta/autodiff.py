"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Graph` is a tape: every call to :meth:`Graph.apply` appends a node,
so insertion order is already a topological order. ``backward`` walks the
tape in reverse.

    >>> g = Graph()
    >>> w = g.param("w", np.array(3.0))
    >>> loss = g.mul(w, w)
    >>> g.backward(loss)["w"]
    array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

EPS = 1e-12

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "concat",
    "slice",
    "tanh",
    "sigmoid",
    "masked_softmax",
    "embedding_lookup",
    "dropout",
    "binary_cross_entropy",
    "categorical_cross_entropy",
    "grad_reverse",
    "sum",
    "scalar_mul",
)


class GraphError(ValueError):
    """Raised for malformed operations: bad shapes, empty masks, misuse of backward."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    cache: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Tape of operation records over float64 tensors.

    Leaves are created with :meth:`param` (differentiable, named) or
    :meth:`const`. All other nodes come from :meth:`apply` or one of the
    thin per-op helpers (``g.tanh(x)`` is ``g.apply("tanh", [x])``).
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    # -- leaves ---------------------------------------------------------
    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, name: str, value) -> int:
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        nid = self._push(Node("param", (), arr, name=name))
        self.params[name] = nid
        return nid

    def const(self, value) -> int:
        return self._push(Node("const", (), np.asarray(value, dtype=np.float64)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    # -- forward --------------------------------------------------------
    def apply(self, op_kind: str, inputs, **attrs) -> int:
        """Append ``op_kind`` applied to node ids ``inputs``; return the new node id."""
        if op_kind not in _FORWARD:
            raise GraphError(f"unknown op_kind {op_kind!r}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op_kind}: unknown input node {i}")
        vals = [self.nodes[i].value for i in inputs]
        cache: dict[str, Any] = {}
        out = _FORWARD[op_kind](vals, attrs, cache)
        return self._push(Node(op_kind, inputs, out, attrs, cache))

    def matmul(self, a, b):
        return self.apply("matmul", [a, b])

    def add(self, a, b):
        return self.apply("add", [a, b])

    def mul(self, a, b):
        return self.apply("mul", [a, b])

    def concat(self, nodes):
        return self.apply("concat", nodes)

    def take_slice(self, x, start, stop):
        return self.apply("slice", [x], start=start, stop=stop)

    def take(self, x, index):
        return self.take_slice(x, index, index + 1)

    def tanh(self, x):
        return self.apply("tanh", [x])

    def sigmoid(self, x):
        return self.apply("sigmoid", [x])

    def masked_softmax(self, x, mask=None):
        return self.apply("masked_softmax", [x], mask=mask)

    def embedding_lookup(self, table, indices):
        return self.apply("embedding_lookup", [table], indices=indices)

    def dropout(self, x, p, rng=None, train=True):
        return self.apply("dropout", [x], p=p, rng=rng, train=train)

    def binary_cross_entropy(self, p, target):
        return self.apply("binary_cross_entropy", [p], target=target)

    def categorical_cross_entropy(self, p, target):
        return self.apply("categorical_cross_entropy", [p], target=target)

    def grad_reverse(self, x, lam):
        return self.apply("grad_reverse", [x], lam=lam)

    def sum(self, x, axis=None):
        return self.apply("sum", [x], axis=axis)

    def scalar_mul(self, x, c):
        return self.apply("scalar_mul", [x], c=c)

    # -- backward -------------------------------------------------------
    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Gradient of scalar node ``loss`` with respect to every parameter, keyed by name."""
        if not self.nodes:
            raise GraphError("backward called before any forward computation")
        if not 0 <= loss < len(self.nodes):
            raise GraphError(f"unknown loss node {loss}")
        if self.nodes[loss].value.size != 1:
            raise GraphError(
                f"backward needs a scalar loss, got shape {self.nodes[loss].value.shape}"
            )
        grads: dict[int, np.ndarray] = {loss: np.ones_like(self.nodes[loss].value)}
        for nid in range(loss, -1, -1):
            node = self.nodes[nid]
            if not node.inputs or nid not in grads:
                continue
            g = grads.pop(nid)
            in_vals = [self.nodes[i].value for i in node.inputs]
            in_grads = _BACKWARD[node.kind](g, in_vals, node.value, node.attrs, node.cache)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or self.nodes[i].kind == "const":
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {
            name: grads.get(nid, np.zeros_like(self.nodes[nid].value))
            for name, nid in self.params.items()
        }


# -- op definitions -----------------------------------------------------

def _shape_error(op, *arrays):
    shapes = ", ".join(str(a.shape) for a in arrays)
    return GraphError(f"{op}: incompatible shapes {shapes}")


def _f_matmul(vals, attrs, cache):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a, b)
    return a @ b


def _b_matmul(g, vals, out, attrs, cache):
    a, b = vals
    return g @ b.T, a.T @ g


def _f_add(vals, attrs, cache):
    a, b = vals
    try:
        return a + b
    except ValueError:
        raise _shape_error("add", a, b) from None


def _b_add(g, vals, out, attrs, cache):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _f_mul(vals, attrs, cache):
    a, b = vals
    try:
        return a * b
    except ValueError:
        raise _shape_error("mul", a, b) from None


def _b_mul(g, vals, out, attrs, cache):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _f_concat(vals, attrs, cache):
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1 or any(v.ndim == 0 for v in vals):
        raise _shape_error("concat", *vals)
    cache["splits"] = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return np.concatenate(vals, axis=-1)


def _b_concat(g, vals, out, attrs, cache):
    return np.split(g, cache["splits"], axis=-1)


def _f_slice(vals, attrs, cache):
    (x,) = vals
    start, stop = attrs["start"], attrs["stop"]
    if x.ndim == 0 or not 0 <= start < stop <= x.shape[-1]:
        raise GraphError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")
    return x[..., start:stop].copy()


def _b_slice(g, vals, out, attrs, cache):
    (x,) = vals
    full = np.zeros_like(x)
    full[..., attrs["start"] : attrs["stop"]] = g
    return (full,)


def _f_tanh(vals, attrs, cache):
    return np.tanh(vals[0])


def _b_tanh(g, vals, out, attrs, cache):
    return (g * (1.0 - out * out),)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _f_sigmoid(vals, attrs, cache):
    return _sigmoid(np.atleast_1d(vals[0])).reshape(vals[0].shape)


def _b_sigmoid(g, vals, out, attrs, cache):
    return (g * out * (1.0 - out),)


def _f_masked_softmax(vals, attrs, cache):
    (x,) = vals
    mask = attrs.get("mask")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise _shape_error("masked_softmax", x, mask)
    if x.ndim == 0:
        raise GraphError("masked_softmax: needs at least one axis")
    if not mask.any(axis=-1).all():
        raise GraphError("masked_softmax: a row has no valid positions")
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def _b_masked_softmax(g, vals, out, attrs, cache):
    inner = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - inner),)


def _f_embedding_lookup(vals, attrs, cache):
    (table,) = vals
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if table.ndim != 2:
        raise GraphError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise GraphError(
            f"embedding_lookup: index out of range for table with {table.shape[0]} rows"
        )
    cache["indices"] = idx
    return table[idx]


def _b_embedding_lookup(g, vals, out, attrs, cache):
    (table,) = vals
    grad = np.zeros_like(table)
    np.add.at(grad, cache["indices"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (grad,)


def _f_dropout(vals, attrs, cache):
    (x,) = vals
    p = attrs["p"]
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout: p must be in [0, 1), got {p}")
    if not attrs.get("train", True) or p == 0.0:
        cache["scale"] = None
        return x.copy()
    rng = attrs.get("rng") or np.random.default_rng()
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    cache["scale"] = scale
    return x * scale


def _b_dropout(g, vals, out, attrs, cache):
    scale = cache["scale"]
    return (g if scale is None else g * scale,)


def _f_bce(vals, attrs, cache):
    (p,) = vals
    y = np.asarray(attrs["target"], dtype=np.float64)
    if y.shape != p.shape:
        raise _shape_error("binary_cross_entropy", p, y)
    pc = np.clip(p, EPS, 1.0 - EPS)
    cache["pc"] = pc
    cache["inside"] = (p > EPS) & (p < 1.0 - EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def _b_bce(g, vals, out, attrs, cache):
    y = np.asarray(attrs["target"], dtype=np.float64)
    pc = cache["pc"]
    d = (-y / pc + (1.0 - y) / (1.0 - pc)) * cache["inside"]
    return (g * d,)


def _f_cce(vals, attrs, cache):
    (p,) = vals
    y = np.asarray(attrs["target"], dtype=np.float64)
    if y.shape != p.shape or p.ndim < 1:
        raise _shape_error("categorical_cross_entropy", p, y)
    pc = np.clip(p, EPS, 1.0)
    cache["pc"] = pc
    cache["inside"] = p > EPS
    return -(y * np.log(pc)).sum(axis=-1)


def _b_cce(g, vals, out, attrs, cache):
    y = np.asarray(attrs["target"], dtype=np.float64)
    d = -y / cache["pc"] * cache["inside"]
    return (g[..., None] * d,)


def _f_grad_reverse(vals, attrs, cache):
    return vals[0].copy()


def _b_grad_reverse(g, vals, out, attrs, cache):
    return (-attrs["lam"] * g,)


def _f_sum(vals, attrs, cache):
    return np.asarray(vals[0].sum(axis=attrs.get("axis")))


def _b_sum(g, vals, out, attrs, cache):
    (x,) = vals
    axis = attrs.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _f_scalar_mul(vals, attrs, cache):
    return vals[0] * float(attrs["c"])


def _b_scalar_mul(g, vals, out, attrs, cache):
    return (g * float(attrs["c"]),)


_FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "mul": _f_mul,
    "concat": _f_concat,
    "slice": _f_slice,
    "tanh": _f_tanh,
    "sigmoid": _f_sigmoid,
    "masked_softmax": _f_masked_softmax,
    "embedding_lookup": _f_embedding_lookup,
    "dropout": _f_dropout,
    "binary_cross_entropy": _f_bce,
    "categorical_cross_entropy": _f_cce,
    "grad_reverse": _f_grad_reverse,
    "sum": _f_sum,
    "scalar_mul": _f_scalar_mul,
}

_BACKWARD: dict[str, Callable] = {
    "matmul": _b_matmul,
    "add": _b_add,
    "mul": _b_mul,
    "concat": _b_concat,
    "slice": _b_slice,
    "tanh": _b_tanh,
    "sigmoid": _b_sigmoid,
    "masked_softmax": _b_masked_softmax,
    "embedding_lookup": _b_embedding_lookup,
    "dropout": _b_dropout,
    "binary_cross_entropy": _b_bce,
    "categorical_cross_entropy": _b_cce,
    "grad_reverse": _b_grad_reverse,
    "sum": _b_sum,
    "scalar_mul": _b_scalar_mul,
}


def grad_check(fn, params: dict[str, np.ndarray], step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(params) -> (loss, grads)`` must be deterministic; ``grads`` maps the
    same names as ``params``. The error per entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-7, 1e-4], got {step}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = fn(params)
    if not np.isfinite(loss):
        raise ValueError("grad_check: loss is not finite")
    worst = 0.0
    for name, arr in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = fn(params)
            flat[i] = orig - step
            down, _ = fn(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
