"""Reverse-mode automatic differentiation on a recorded computation graph.

Every :class:`Node` holds a numpy value (0-d for scalars) and, for each parent,
a vector-Jacobian product that maps the node's adjoint to the parent's adjoint
contribution.  Nodes are numbered in creation order, so a reverse sweep in
descending id order is a valid topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()

OPS = frozenset(
    {
        "add", "mul", "sub", "div", "neg", "tanh", "sigmoid", "square", "sqrt",
        "log", "exp", "matmul", "sum", "relu", "clip", "index", "stack", "transpose",
        "constant", "input", "parameter",
    }
)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    """A value recorded on the computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "id")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), op: str = "constant"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[tuple[Node, Callable[[np.ndarray], np.ndarray]], ...] = parents
        self.op = op
        self.grad: np.ndarray | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def constant(value) -> Node:
    return Node(value, op="constant")


def input_node(value) -> Node:
    return Node(value, op="input")


def parameter(value) -> Node:
    return Node(value, op="parameter")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="constant")


def _binary(a, b, value, op, da, db) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    parents = []
    if a.op != "constant" or a.parents:
        parents.append((a, lambda g: _unbroadcast(da(g), sa)))
    if b.op != "constant" or b.parents:
        parents.append((b, lambda g: _unbroadcast(db(g), sb)))
    return Node(value, tuple(parents), op)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.value + b.value, "add", lambda g: g, lambda g: g)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _binary(a, b, a.value - b.value, "sub", lambda g: g, lambda g: -g)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _binary(a, b, av * bv, "mul", lambda g: g * bv, lambda g: g * av)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _binary(a, b, out, "div", lambda g: g / bv, lambda g: -g * out / bv)


def _unary(a, value, op, d) -> Node:
    a = as_node(a)
    return Node(value, ((a, d),), op)


def neg(a) -> Node:
    return _unary(a, -as_node(a).value, "neg", lambda g: -g)


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _unary(a, out, "tanh", lambda g: g * (1.0 - out * out))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_value(x) -> np.ndarray:
    return _sigmoid(np.atleast_1d(np.asarray(x, dtype=np.float64))).reshape(np.shape(x))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = sigmoid_value(a.value)
    return _unary(a, out, "sigmoid", lambda g: g * out * (1.0 - out))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _unary(a, av * av, "square", lambda g: 2.0 * g * av)


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return _unary(a, out, "sqrt", lambda g: 0.5 * g / out)


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _unary(a, np.log(av), "log", lambda g: g / av)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _unary(a, out, "exp", lambda g: g * out)


def relu(a) -> Node:
    """max(0, a); the subgradient at 0 is taken as 0."""
    a = as_node(a)
    mask = a.value > 0
    return _unary(a, np.where(mask, a.value, 0.0), "relu", lambda g: g * mask)


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    mask = (a.value > lo) & (a.value < hi)
    return _unary(a, np.clip(a.value, lo, hi), "clip", lambda g: g * mask)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def da(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return g @ bv.T

    def db(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    parents = []
    if a.op != "constant" or a.parents:
        parents.append((a, da))
    if b.op != "constant" or b.parents:
        parents.append((b, db))
    return Node(out, tuple(parents), "matmul")


def sum_(a, axis: int | None = None) -> Node:
    a = as_node(a)
    shape = a.shape
    out = a.value.sum(axis=axis)

    def d(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _unary(a, out, "sum", d)


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def index(a, key) -> Node:
    a = as_node(a)
    shape = a.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)

    def d(g):
        out = np.zeros(shape)
        if basic:
            # basic keys never repeat an element
            out[key] = g
        else:
            np.add.at(out, key, g)
        return out

    return _unary(a, a.value[key], "index", d)


def stack(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)
    parents = []
    for i, n in enumerate(nodes):
        if n.op == "constant" and not n.parents:
            continue
        parents.append((n, lambda g, i=i: np.take(g, i, axis=axis)))
    return Node(out, tuple(parents), "stack")


def unstack(a: Node, axis: int = -1) -> list[Node]:
    n = a.shape[axis]
    key = [slice(None)] * a.value.ndim
    cols = []
    for i in range(n):
        key[axis] = i
        cols.append(index(a, tuple(key)))
    return cols


def backward(output: Node, wrt: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Propagate adjoints from a scalar ``output`` to every ancestor.

    Returns a map from node to gradient; ``node.grad`` is also set.  With
    ``wrt`` the map is restricted to those nodes (zeros where unreachable).
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    seen = {output.id: output}
    stack_ = [output]
    while stack_:
        node = stack_.pop()
        for parent, _ in node.parents:
            if parent.id not in seen:
                seen[parent.id] = parent
                stack_.append(parent)
    order = sorted(seen.values(), key=lambda n: n.id, reverse=True)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in order:
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64).reshape(parent.shape)
            else:
                parent.grad = parent.grad + contrib
    if wrt is None:
        return {n: n.grad for n in order if n.grad is not None}
    return {
        n: (n.grad if n.grad is not None and n.id in seen else np.zeros_like(n.value))
        for n in wrt
    }


def grad(fn: Callable[..., Node], *args: np.ndarray) -> list[np.ndarray]:
    """Gradient of a scalar-valued ``fn`` with respect to each array argument."""
    nodes = [input_node(a) for a in args]
    out = fn(*nodes)
    g = backward(out, nodes)
    return [g[n] for n in nodes]
