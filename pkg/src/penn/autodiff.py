"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the PENN pipeline needs are provided. Every op takes
``Var`` or array-like inputs and returns a ``Var``; gradients are
accumulated by ``backward`` in reverse topological order.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=None, name=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        # parents: tuple of (Var, fn) where fn maps the output gradient to the parent's
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in self.parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def backward(self, seed=None):
        backward(self, seed)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _make(val, *links):
    parents = tuple((p, fn) for p, fn in links if p.requires_grad)
    return Var(val, parents, requires_grad=bool(parents))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def neg(a) -> Var:
    a = as_var(a)
    return _make(-a.value, (a, lambda g: -g))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(
        av / bv,
        (a, lambda g: _unbroadcast(g / bv, a.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a, lambda g: np.transpose(g, inv)))


def total(a) -> Var:
    a = as_var(a)
    shape = a.shape
    return _make(np.sum(a.value), (a, lambda g: np.broadcast_to(g, shape).copy()))


def vdot(a, b) -> Var:
    """Full contraction ``sum(a * b)`` as a scalar."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _make(
        np.dot(av.ravel(), bv.ravel()),
        (a, lambda g: g * bv),
        (b, lambda g: g * av),
    )


def linear(x, weight, bias=None) -> Var:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    x, w = as_var(x), as_var(weight)
    xv, wv = x.value, w.value
    out = _make(
        xv @ wv.T,
        (x, lambda g: g @ wv),
        (w, lambda g: g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])),
    )
    if bias is not None:
        out = add(out, bias)
    return out


def matmul_const(x, m) -> Var:
    """``x @ m`` with a constant dense matrix ``m`` on the last axis."""
    x = as_var(x)
    m = np.asarray(m, float)
    return _make(x.value @ m, (x, lambda g: g @ m.T))


def spmm(A: sp.spmatrix, x, At: sp.spmatrix = None) -> Var:
    """Constant sparse matrix times a 2-D ``Var`` (``At`` may be precomputed)."""
    x = as_var(x)
    if At is None:
        At = A.T.tocsr()
    return _make(A @ x.value, (x, lambda g: At @ g))


def leaky_relu(x, a: float) -> Var:
    x = as_var(x)
    slope = np.where(x.value >= 0, 1.0, a)
    return _make(x.value * slope, (x, lambda g: g * slope))


def leaky_relu_inv(y, a: float) -> Var:
    y = as_var(y)
    slope = np.where(y.value >= 0, 1.0, 1.0 / a)
    return _make(np.where(y.value >= 0, y.value, y.value / a), (y, lambda g: g * slope))


def tanh(x) -> Var:
    x = as_var(x)
    t = np.tanh(x.value)
    return _make(t, (x, lambda g: g * (1.0 - t * t)))


def gather_rows(x, idx) -> Var:
    x = as_var(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _make(x.value[idx], (x, back))


def scatter_rows(vals, idx, n) -> Var:
    """Rows of a zero array of length ``n`` set to ``vals`` at ``idx``."""
    vals = as_var(vals)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + vals.shape[1:])
    out[idx] = vals.value
    return _make(out, (vals, lambda g: g[idx]))


def overwrite_rows(x, idx, vals) -> Var:
    """Copy of ``x`` with rows ``idx`` replaced by ``vals``."""
    x, vals = as_var(x), as_var(vals)
    idx = np.asarray(idx, dtype=np.int64)
    out = x.value.copy()
    out[idx] = vals.value

    def back_x(g):
        g = g.copy()
        g[idx] = 0.0
        return g

    return _make(out, (x, back_x), (vals, lambda g: g[idx]))


def pinv(w, rtol: float = 1e-12, P=None) -> Var:
    """Moore-Penrose pseudoinverse with the constant-rank derivative.

    ``P`` may pass an already computed pseudoinverse of ``w.value``.
    """
    from penn.nn import pseudoinverse

    w = as_var(w)
    A = w.value
    if P is None:
        P = pseudoinverse(A, rtol)

    def back(G):
        m, n = A.shape
        PtG = P.T @ G
        out = -PtG @ P.T
        out += (np.eye(m) - A @ P) @ G.T @ P @ P.T
        out += P.T @ P @ G.T @ (np.eye(n) - P @ A)
        return out

    return _make(P, (w, back))


def backward(root: Var, seed=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not root.requires_grad:
        return
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed, float)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, fn in node.parents:
            pg = fn(g)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
