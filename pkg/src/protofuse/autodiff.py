"""Reverse-mode automatic differentiation over numpy arrays.

Each operation records its parent nodes together with a closure mapping the
output gradient to parent gradients; ``backward`` replays those closures in
reverse topological order. Every helper in this module also accepts plain
ndarrays and falls back to numpy, so numerical code can be written once and
executed either traced (when gradients are needed) or untraced (fast
inference path).

All values are float64. Stability-sensitive compositions (``softmax_rows``,
``logsumexp_rows``) subtract a detached row maximum, which changes neither
the value nor the derivative.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node", "is_node", "value_of", "backward",
    "add", "sub", "mul", "div", "matmul", "transpose", "reshape",
    "relu", "exp", "log", "sqrt", "maximum", "sum", "mean",
    "stack", "vstack", "take_rows", "col",
    "softmax_rows", "logsumexp_rows",
]


class Node:
    """One value in a recorded computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # Defer all numpy-mixed arithmetic to the operators below instead of
    # letting numpy build object arrays.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={self._vjp is None})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x) -> np.ndarray:
    """Underlying float64 array of a Node or array-like."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeezed:
        grad = grad.sum(axis=squeezed, keepdims=True)
    return grad.reshape(shape)


def _lift(out_value, entries):
    parents = tuple(node for node, _ in entries)
    fns = tuple(fn for _, fn in entries)

    def vjp(g):
        return tuple(fn(g) for fn in fns)

    return Node(out_value, parents, vjp)


def add(a, b):
    if not (is_node(a) or is_node(b)):
        return np.asarray(a, np.float64) + np.asarray(b, np.float64)
    av, bv = value_of(a), value_of(b)
    entries = []
    if is_node(a):
        entries.append((a, lambda g: _unbroadcast(g, av.shape)))
    if is_node(b):
        entries.append((b, lambda g: _unbroadcast(g, bv.shape)))
    return _lift(av + bv, entries)


def sub(a, b):
    if not (is_node(a) or is_node(b)):
        return np.asarray(a, np.float64) - np.asarray(b, np.float64)
    av, bv = value_of(a), value_of(b)
    entries = []
    if is_node(a):
        entries.append((a, lambda g: _unbroadcast(g, av.shape)))
    if is_node(b):
        entries.append((b, lambda g: _unbroadcast(-g, bv.shape)))
    return _lift(av - bv, entries)


def mul(a, b):
    if not (is_node(a) or is_node(b)):
        return np.asarray(a, np.float64) * np.asarray(b, np.float64)
    av, bv = value_of(a), value_of(b)
    entries = []
    if is_node(a):
        entries.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if is_node(b):
        entries.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return _lift(av * bv, entries)


def div(a, b):
    if not (is_node(a) or is_node(b)):
        return np.asarray(a, np.float64) / np.asarray(b, np.float64)
    av, bv = value_of(a), value_of(b)
    entries = []
    if is_node(a):
        entries.append((a, lambda g: _unbroadcast(g / bv, av.shape)))
    if is_node(b):
        entries.append((b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))
    return _lift(av / bv, entries)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ValueError(f"matmul supports vectors and matrices, got {av.ndim}-d @ {bv.ndim}-d")
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    if not (is_node(a) or is_node(b)):
        return av @ bv
    entries = []
    if av.ndim == 2 and bv.ndim == 2:
        if is_node(a):
            entries.append((a, lambda g: g @ bv.T))
        if is_node(b):
            entries.append((b, lambda g: av.T @ g))
    elif av.ndim == 2 and bv.ndim == 1:
        if is_node(a):
            entries.append((a, lambda g: np.outer(g, bv)))
        if is_node(b):
            entries.append((b, lambda g: av.T @ g))
    elif av.ndim == 1 and bv.ndim == 2:
        if is_node(a):
            entries.append((a, lambda g: bv @ g))
        if is_node(b):
            entries.append((b, lambda g: np.outer(av, g)))
    else:
        if is_node(a):
            entries.append((a, lambda g: g * bv))
        if is_node(b):
            entries.append((b, lambda g: g * av))
    return _lift(av @ bv, entries)


def transpose(x):
    if not is_node(x):
        return np.asarray(x, np.float64).T
    if x.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _lift(x.value.T, [(x, lambda g: g.T)])


def reshape(x, shape):
    if not is_node(x):
        return np.asarray(x, np.float64).reshape(shape)
    old = x.value.shape
    return _lift(x.value.reshape(shape), [(x, lambda g: g.reshape(old))])


def relu(x):
    if not is_node(x):
        return np.maximum(np.asarray(x, np.float64), 0.0)
    mask = x.value > 0.0
    return _lift(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)])


def exp(x):
    if not is_node(x):
        return np.exp(np.asarray(x, np.float64))
    out = np.exp(x.value)
    return _lift(out, [(x, lambda g: g * out)])


def log(x):
    if not is_node(x):
        return np.log(np.asarray(x, np.float64))
    return _lift(np.log(x.value), [(x, lambda g: g / x.value)])


def sqrt(x):
    if not is_node(x):
        return np.sqrt(np.asarray(x, np.float64))
    out = np.sqrt(x.value)
    return _lift(out, [(x, lambda g: g * (0.5 / out))])


def maximum(a, b):
    """Elementwise maximum; at ties the gradient routes to the first argument."""
    if not (is_node(a) or is_node(b)):
        return np.maximum(np.asarray(a, np.float64), np.asarray(b, np.float64))
    av, bv = value_of(a), value_of(b)
    take_a = av >= bv
    entries = []
    if is_node(a):
        entries.append((a, lambda g: _unbroadcast(g * take_a, av.shape)))
    if is_node(b):
        entries.append((b, lambda g: _unbroadcast(g * ~take_a, bv.shape)))
    return _lift(np.maximum(av, bv), entries)


def sum(x, axis=None):
    if not is_node(x):
        return np.sum(np.asarray(x, np.float64), axis=axis)
    xv = x.value
    if axis is None:
        vjp_fn = lambda g: np.full(xv.shape, g, dtype=np.float64)
    else:
        vjp_fn = lambda g: np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()
    return _lift(xv.sum(axis=axis), [(x, vjp_fn)])


def mean(x, axis=None):
    if not is_node(x):
        return np.mean(np.asarray(x, np.float64), axis=axis)
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def stack(parts):
    """Stack 1-d vectors into a matrix, tracing through Node rows."""
    values = [value_of(p) for p in parts]
    out = np.stack(values)
    if not any(is_node(p) for p in parts):
        return out
    entries = [(p, lambda g, i=i: g[i]) for i, p in enumerate(parts) if is_node(p)]
    return _lift(out, entries)


def vstack(parts):
    """Stack matrices by rows, tracing through Node blocks."""
    values = [value_of(p) for p in parts]
    out = np.vstack(values)
    if not any(is_node(p) for p in parts):
        return out
    entries = []
    offset = 0
    for part, val in zip(parts, values):
        rows = val.shape[0]
        if is_node(part):
            entries.append((part, lambda g, o=offset, r=rows: g[o:o + r]))
        offset += rows
    return _lift(out, entries)


def take_rows(x, indices):
    indices = np.asarray(indices, dtype=np.intp)
    if not is_node(x):
        return np.asarray(x, np.float64)[indices]
    xv = x.value

    def vjp_fn(g):
        out = np.zeros_like(xv)
        np.add.at(out, indices, g)
        return out

    return _lift(xv[indices], [(x, vjp_fn)])


def col(x, index: int):
    """Column ``index`` of a matrix as a vector."""
    if not is_node(x):
        return np.asarray(x, np.float64)[:, index]
    xv = x.value

    def vjp_fn(g):
        out = np.zeros_like(xv)
        out[:, index] = g
        return out

    return _lift(xv[:, index], [(x, vjp_fn)])


def softmax_rows(z):
    """Row-wise softmax with a detached max shift (value and gradient exact)."""
    shift = value_of(z).max(axis=1, keepdims=True)
    e = exp(sub(z, shift))
    totals = sum(e, axis=1)
    n = value_of(z).shape[0]
    return div(e, reshape(totals, (n, 1)))


def logsumexp_rows(z):
    shift = value_of(z).max(axis=1, keepdims=True)
    inner = sum(exp(sub(z, shift)), axis=1)
    return add(log(inner), shift[:, 0])


def _topological_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, seed=None) -> None:
    """Populate ``.grad`` on every node reachable from ``root``.

    ``seed`` defaults to ones (the usual scalar-loss case) and must match the
    root's shape.
    """
    if not is_node(root):
        raise TypeError("backward requires a traced Node")
    g0 = np.ones_like(root.value) if seed is None else np.asarray(seed, np.float64)
    if g0.shape != root.value.shape:
        raise ValueError(f"seed gradient shape {g0.shape} does not match output {root.value.shape}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = g0
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(node.grad)):
            pg = np.asarray(pg, np.float64)
            parent.grad = pg if parent.grad is None else parent.grad + pg
