"""Reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Node` that remembers its parents and a
vector-Jacobian product.  Nodes that do not depend on any differentiable
leaf are plain constants and record no graph, so evaluating a model with
frozen parameters costs little more than raw numpy.

Only scalar outputs can be differentiated and only first derivatives are
supported.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from raregen.errors import ContractError, NumericError

__all__ = [
    "Node",
    "variable",
    "constant",
    "as_node",
    "backward",
    "grad",
    "graph_nodes",
    "exp",
    "log",
    "tanh",
    "logistic",
    "log_logistic",
    "square",
    "sqrt",
    "abs_",
    "maximum",
    "softmax",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "matmul",
]


class Node:
    """A value in the differentiation graph.

    ``vjp`` maps the upstream gradient to one gradient per parent (``None``
    for parents that do not require gradients).
    """

    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, op="leaf", requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def variable(value, name=None) -> Node:
    """A differentiable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value, name=None) -> Node:
    return Node(value, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _make(value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic(a) -> Node:
    a = as_node(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "logistic")


def log_logistic(a) -> Node:
    """``log(logistic(a))`` without underflow for large negative inputs."""
    a = as_node(a)
    av = a.value
    out = -(np.maximum(-av, 0.0) + np.log1p(np.exp(-np.abs(av))))
    return _make(out, (a,), lambda g: (g * _sigmoid(-av),), "log_logistic")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def sqrt(a) -> Node:
    """Square root whose gradient at exactly zero is taken as 0 (subgradient)."""
    a = as_node(a)
    out = np.sqrt(a.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0.0, g / (2.0 * np.where(out > 0.0, out, 1.0)), 0.0),)

    return _make(out, (a,), vjp, "sqrt")


def abs_(a) -> Node:
    a = as_node(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def maximum(a, floor) -> Node:
    """Elementwise ``max(a, floor)`` against a constant scalar or array; gradient flows where ``a > floor``."""
    a = as_node(a)
    av = a.value
    mask = av > floor
    return _make(np.where(mask, av, floor), (a,), lambda g: (g * mask,), "maximum")


def softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# -- reductions and shape ops -------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    inverse = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Node:
    a = as_node(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _make(a.value[index], (a,), vjp, "getitem")


def concat(nodes: Iterable, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def matmul(a, b) -> Node:
    """Batched matrix product with numpy broadcasting; both operands need ndim >= 2."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), vjp, "matmul")


# -- the backward pass -------------------------------------------------------


def graph_nodes(output: Node) -> list[Node]:
    """Differentiable nodes reachable from ``output`` in topological order (inputs first)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _label(node: Node) -> str:
    return f"{node.op}" + (f" '{node.name}'" if node.name else "")


def backward(output: Node) -> dict[Node, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every differentiable leaf.

    Each node is visited once, in reverse topological order.  Raises
    :class:`NumericError` naming the first node whose gradient is not finite.
    """
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    order = graph_nodes(output)
    pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient flowing out of {_label(node)} into {_label(parent)}")
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaves


def grad(output: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of ``output`` for each node in ``wrt`` (zeros if unreachable)."""
    found = backward(output)
    return [found.get(node, np.zeros_like(node.value)) for node in wrt]
