"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: float64 values, graphs built eagerly by the operations
below, gradients accumulated by one topological backward sweep. Only
the operations the models in this package need are provided.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """Graph node. `value` is always a float64 ndarray; `grad` is filled
    by backward() and accumulates until cleared by the caller."""

    __slots__ = ("value", "grad", "requires_grad", "_edges")

    def __init__(self, value, requires_grad: bool = False, _edges=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._edges = _edges  # tuple of (parent, vjp) pairs
        self.requires_grad = requires_grad or bool(_edges)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.grad is not None})"

    # -- arithmetic sugar ---------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.value)

    # -- backward -----------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into .grad of every reachable node."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._edges:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def node(value, *pairs) -> Tensor:
    """Build a graph node from a computed value and (parent, vjp) pairs;
    used by modules that wrap external kernels with custom gradients."""
    edges = tuple((p, f) for p, f in pairs if p.requires_grad)
    return Tensor(value, _edges=edges)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return node(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return node(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return node(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return node(
        a.value / b.value,
        (a, lambda g: _unbroadcast(g / b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return node(-a.value, (a, lambda g: -g))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return node(a.value ** p, (a, lambda g: g * p * a.value ** (p - 1.0)))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return node(np.abs(a.value), (a, lambda g: g * np.sign(a.value)))


def where(cond: np.ndarray, a, b) -> Tensor:
    """cond is a plain boolean array, not differentiated through."""
    a, b = as_tensor(a), as_tensor(b)
    return node(
        np.where(cond, a.value, b.value),
        (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.value.shape)),
        (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.value.shape)),
    )


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    keep = a.value >= 0
    return node(
        np.where(keep, a.value, slope * a.value),
        (a, lambda g: g * np.where(keep, 1.0, slope)),
    )


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return node(
        s,
        (a, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True))),
    )


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return node(a.value.reshape(shape), (a, lambda g: g.reshape(a.value.shape)))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return node(np.swapaxes(a.value, ax1, ax2), (a, lambda g: np.swapaxes(g, ax1, ax2)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return node(a.value[idx], (a, vjp))


def take_rows(a, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate gradient."""
    return getitem(a, np.asarray(indices))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * tensors[i].value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return node(
        np.concatenate([t.value for t in tensors], axis=axis),
        *((t, make_vjp(i)) for i, t in enumerate(tensors)),
    )


# ---------------------------------------------------------------------------
# reductions and contractions
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg, a.value.shape)

    return node(a.value.sum(axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[i] for i in np.atleast_1d(axis)]
    )

    def vjp(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return np.broadcast_to(gg / count, a.value.shape)

    return node(a.value.mean(axis=axis, keepdims=keepdims), (a, vjp))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul expects stacks of matrices")
    return node(
        a.value @ b.value,
        (a, lambda g: _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)),
    )
