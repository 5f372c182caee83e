"""A small reverse-mode tape over float64 numpy arrays.

Only the operations the policy network and the PPO loss need are here.
Constant sparse matrices (scipy) express every gather, scatter and
segment reduction, so their adjoint is simply the transpose.
"""
from __future__ import annotations

import numpy as np


class NumericError(FloatingPointError):
    """A NaN or infinity showed up in a forward value or a gradient."""


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}{', ' + self.name if self.name else ''})"

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            v, done = stack.pop()
            if done:
                order.append(v)
                continue
            if id(v) in seen:
                continue
            seen.add(id(v))
            stack.append((v, True))
            for p in v.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for v in order:
            v.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for v in reversed(order):
            if v.backward_fn is None or v.grad is None:
                continue
            grads = v.backward_fn(v.grad)
            for p, g in zip(v.parents, grads):
                if g is None:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, b) -> Var:
    av, bv = a.value, b.value
    return Var(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a) -> Var:
    y = np.tanh(a.value)
    return Var(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Var:
    mask = a.value > 0
    return Var(a.value * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Var:
    y = np.exp(a.value)
    return Var(y, (a,), lambda g: (g * y,))


def square(a) -> Var:
    av = a.value
    return Var(av * av, (a,), lambda g: (2.0 * av * g,))


def minimum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    pick_a = a.value <= b.value
    return Var(np.where(pick_a, a.value, b.value), (a, b),
               lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a, lo, hi) -> Var:
    inside = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def concat(vs, axis=1) -> Var:
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([v.value for v in vs], axis=axis), tuple(vs),
               lambda g: tuple(np.split(g, cuts, axis=axis)))


def spmm(S, a) -> Var:
    """Constant sparse (or dense) matrix times a variable."""
    return Var(S @ a.value, (a,), lambda g: (S.T @ g,))


def total(a) -> Var:
    shape = a.shape
    return Var(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Var:
    shape, n = a.shape, a.value.size
    return Var(a.value.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def segment_log_softmax(a, offsets: np.ndarray) -> Var:
    """Log-softmax of a column vector within contiguous segments.

    ``offsets`` holds the start index of every segment (ascending, first 0);
    segments must be non-empty.
    """
    x = a.value.reshape(-1)
    mx = np.maximum.reduceat(x, offsets)
    counts = np.diff(np.append(offsets, len(x)))
    seg = np.repeat(np.arange(len(offsets)), counts)
    z = x - mx[seg]
    lse = np.log(np.add.reduceat(np.exp(z), offsets))
    y = z - lse[seg]
    p = np.exp(y)
    shape = a.shape

    def back(g):
        g = g.reshape(-1)
        s = np.add.reduceat(g, offsets)
        return ((g - p * s[seg]).reshape(shape),)

    return Var(y.reshape(shape), (a,), back)


def check_finite(v: Var, where: str) -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite value in {where}")
    return v
