"""Dense float64 tensors with a recorded tape for reverse-mode differentiation.

Only the operations needed by the MLP, the losses and the unrolled correction
are provided.  Every op works on plain numpy data; when at least one input
lives on a :class:`Tape` the result is recorded there together with a
vector-Jacobian product closure, otherwise the result is an untaped constant.

Example::

    tape = Tape()
    w = tape.leaf(np.ones((3, 1)), name="w")
    loss = ad.sum(ad.relu(x @ w))
    grads = backward(tape, loss)
    grads[w]
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Tape", "Gradients", "backward", "constant", "custom",
    "matmul", "add", "sub", "mul", "scale", "neg", "relu", "sigmoid", "sin",
    "square", "sum", "mean", "concat", "take", "batch_norm", "dropout",
    "sq_hinge", "finite_difference_check", "numeric_gradient",
]


class _Node:
    __slots__ = ("kind", "parents", "vjp", "name")

    def __init__(self, kind, parents, vjp, name=None):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of the operations executed on taped tensors.

    Node ``i`` only ever references parents with ids ``< i``, so a reverse
    sweep over the node list is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}
        self.leaf_shapes: dict[int, tuple] = {}

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        """Drop all recorded nodes; breaks the tape/closure reference cycles."""
        self.nodes.clear()
        self.leaves.clear()
        self.leaf_shapes.clear()

    def leaf(self, value, name: str | None = None) -> "Tensor":
        data = np.asarray(value, dtype=np.float64)
        _check_finite("leaf", data)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, name))
        self.leaf_shapes[node_id] = data.shape
        t = Tensor(data, self, node_id)
        if name is not None:
            self.leaves[name] = t
        return t

    def _record(self, kind, parents, value, vjp) -> "Tensor":
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, parents, vjp))
        return Tensor(value, self, node_id)


class Tensor:
    __slots__ = ("data", "tape", "id")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = data
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.id}"
        return f"Tensor(shape={self.data.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


class Gradients(dict):
    """Leaf gradients keyed by node id; also indexable by the leaf tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)


def constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _check_finite(kind, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output in op '{kind}'")


def _tape_of(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def _make(kind, inputs: Sequence[Tensor], value, vjp) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(kind, value)
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(value)
    parents = tuple(t.id if t.tape is tape else None for t in inputs)
    return tape._record(kind, parents, value, vjp)


def custom(kind: str, inputs: Sequence, value, vjp: Callable) -> Tensor:
    """Record an op with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    inputs = [constant(t) for t in inputs]
    return _make(kind, inputs, value, vjp)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = constant(a)
    c = float(c)
    return _make("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None
    return _make("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T if need_a else None, ad.T @ g if need_b else None))


# ---------------------------------------------------------------- elementwise

def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = constant(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def sin(a) -> Tensor:
    a = constant(a)
    c = np.cos(a.data)
    return _make("sin", (a,), np.sin(a.data), lambda g: (g * c,))


def square(a) -> Tensor:
    a = constant(a)
    x = a.data
    return _make("square", (a,), x * x, lambda g: (2.0 * g * x,))


def sq_hinge(g) -> Tensor:
    """Row-wise squared norm of the positive part: ``sum_j relu(g_ij)**2``."""
    g = constant(g)
    if g.ndim != 2:
        raise DimensionError(f"sq_hinge: expected a batch matrix, got shape {g.shape}")
    r = np.maximum(g.data, 0.0)
    return _make("sq_hinge", (g,), (r * r).sum(axis=1),
                 lambda go: (2.0 * r * go[:, None],))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = constant(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", (a,), a.data.sum(axis=axis), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = constant(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat", tensors, value, vjp)


def take(a, index, axis: int = 1) -> Tensor:
    """Select entries ``index`` along ``axis`` (a slice when index is a range)."""
    a = constant(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise DimensionError(f"take: index out of range for axis {axis} of shape {a.shape}")
    unique = np.unique(index).size == index.size
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        if unique:
            out[tuple(sl)] = g
        else:
            np.add.at(out, tuple(sl), g)
        return (out,)

    return _make("take", (a,), np.take(a.data, index, axis=axis), vjp)


# ---------------------------------------------------------------- layers

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of a batch matrix.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running statistics
    are used and nothing is mutated.
    """
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm: shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    xd, gd = x.data, gamma.data
    if training:
        batch = xd.shape[0]
        if batch < 2:
            raise ContractError("batch_norm: training mode needs a batch of at least 2")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * batch / (batch - 1)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv_std

        def vjp(g):
            dxhat = g * gd
            dx = inv_std / batch * (batch * dxhat - dxhat.sum(axis=0)
                                    - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv_std

        def vjp(g):
            return g * gd * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make("batch_norm", (x, gamma, beta), gd * xhat + beta.data, vjp)


def dropout(x, mask: np.ndarray | None, rate: float) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)``; ``mask=None`` is eval mode."""
    x = constant(x)
    if mask is None or rate == 0.0:
        return x
    if mask.shape != x.shape:
        raise DimensionError(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    factor = mask.astype(np.float64) / (1.0 - rate)
    return _make("dropout", (x,), x.data * factor, lambda g: (g * factor,))


# ---------------------------------------------------------------- reverse sweep

def backward(tape: Tape, root: Tensor) -> Gradients:
    """Gradient of a scalar ``root`` with respect to every leaf on ``tape``.

    The tape is left untouched, so the same tape can be swept again.
    """
    if root.tape is not tape:
        raise ContractError("root tensor is not recorded on this tape")
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    adj: list = [None] * (root.id + 1)
    adj[root.id] = np.ones_like(root.data)
    grads = Gradients()
    for i in range(root.id, -1, -1):
        g = adj[i]
        if g is None:
            continue
        adj[i] = None
        node = nodes[i]
        if node.kind == "leaf":
            grads[i] = g
            continue
        for pid, contrib in zip(node.parents, node.vjp(g)):
            if pid is None or contrib is None:
                continue
            adj[pid] = contrib if adj[pid] is None else adj[pid] + contrib
    for i, shape in tape.leaf_shapes.items():
        if i not in grads:
            grads[i] = np.zeros(shape)
    return grads


# ---------------------------------------------------------------- finite differences

def numeric_gradient(f: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def finite_difference_check(fn: Callable, point, eps: float = 1e-6, analytic=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``fn`` maps a Tensor to a scalar Tensor built from the ops in this module;
    its analytic gradient comes from :func:`backward`.  Alternatively pass
    ``analytic`` (an array) and let ``fn`` be any array -> float callable.
    The error is ``max_i |a_i - d_i| / max(1, |a_i|)``.
    """
    x = np.array(point, dtype=np.float64)
    if analytic is None:
        tape = Tape()
        leaf = tape.leaf(x.copy())
        out = fn(leaf)
        analytic = backward(tape, out)[leaf]

        def scalar(v):
            return float(fn(constant(v)).data)
    else:
        analytic = np.asarray(analytic, dtype=np.float64)

        def scalar(v):
            res = fn(v)
            return float(res.data if isinstance(res, Tensor) else res)

    numeric = numeric_gradient(scalar, x, eps)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
