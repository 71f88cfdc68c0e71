"""A small reverse-mode autodiff tape over numpy arrays.

Every op appends a node to the active :class:`Tape`; nodes are created in
topological order, so the backward pass is a reverse sweep over the list.
Only what the networks in this package need is implemented.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "parents", "backward", "needs_grad", "tape")

    def __init__(self, tape: "Tape", value: np.ndarray, parents=(), backward=None, needs_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward = backward
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, needs_grad={self.needs_grad})"


class Tape:
    """Records a computation so :meth:`grad` can differentiate it."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        v = Var(self, value, needs_grad=True)
        self.nodes.append(v)
        self.leaves[name] = v
        return v

    def const(self, value) -> Var:
        return Var(self, np.asarray(value))

    def _record(self, value, parents: Sequence[Var], backward: Callable) -> Var:
        needs = any(p.needs_grad for p in parents)
        v = Var(self, value, tuple(parents), backward if needs else None, needs)
        if needs:
            self.nodes.append(v)
        return v

    def grad(self, loss: Var, wrt: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. the named leaves."""
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if np.size(loss.value) != 1:
            raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        names = list(self.leaves) if wrt is None else list(wrt)
        for n in names:
            if n not in self.leaves:
                raise KeyError(f"no leaf named {n!r} on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if gp is None or not p.needs_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
        out = {}
        for n in names:
            leaf = self.leaves[n]
            g = grads.get(id(leaf))
            out[n] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=leaf.value.dtype)
        return out


def _as_var(x, tape: Tape, like: "Var | None" = None) -> Var:
    if isinstance(x, Var):
        return x
    # keep float32 graphs float32: a 0-d float64 array would upcast under NEP 50
    if like is not None and np.ndim(x) == 0:
        return tape.const(np.asarray(x, dtype=like.value.dtype))
    return tape.const(x)


def _pair(a, b):
    tp = _tape_of(a, b)
    ref = a if isinstance(a, Var) else b
    return tp, _as_var(a, tp, ref), _as_var(b, tp, ref)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    tp, a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tp._record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tp, a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tp._record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tp, a, b = _pair(a, b)
    av, bv = a.value, b.value
    return tp._record(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if a.needs_grad else None,
            _unbroadcast(g * av, bv.shape) if b.needs_grad else None,
        ),
    )


def matmul(a, b) -> Var:
    tp, a, b = _pair(a, b)
    av, bv = a.value, b.value
    return tp._record(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T if a.needs_grad else None, av.T @ g if b.needs_grad else None),
    )


def linear(x, w, b=None) -> Var:
    """x @ w + b with x of shape (batch, in)."""
    tp = _tape_of(x, w, b)
    x, w = _as_var(x, tp), _as_var(w, tp)
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is None:
        return tp._record(
            out, (x, w), lambda g: (g @ wv.T if x.needs_grad else None, xv.T @ g if w.needs_grad else None)
        )
    b = _as_var(b, tp)
    out += b.value
    return tp._record(
        out,
        (x, w, b),
        lambda g: (
            g @ wv.T if x.needs_grad else None,
            xv.T @ g if w.needs_grad else None,
            g.sum(axis=0) if b.needs_grad else None,
        ),
    )


def silu(x: Var) -> Var:
    xv = x.value
    s = 1.0 / (1.0 + np.exp(-xv))
    return x.tape._record(xv * s, (x,), lambda g: (g * (s * (1.0 + xv * (1.0 - s))),))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape._record(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return x.tape._record(y, (x,), lambda g: (g * y,))


def sqrt(x: Var) -> Var:
    y = np.sqrt(x.value)
    return x.tape._record(y, (x,), lambda g: (g * 0.5 / y,))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape._record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def abs_(x: Var) -> Var:
    xv = x.value
    return x.tape._record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def sum_(x: Var, axis=None, keepdims=False) -> Var:
    shape = x.value.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Var, axis=None, keepdims=False) -> Var:
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return x.tape._record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Var, idx) -> Var:
    shape, dtype = x.value.shape, x.value.dtype

    basic = isinstance(idx, slice) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) or i is None for i in idx)
    )

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return x.tape._record(x.value[idx], (x,), back)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    tp = _tape_of(*xs)
    xs = [_as_var(x, tp) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return tp._record(np.concatenate([x.value for x in xs], axis=axis), xs, back)


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return x.tape._record(y, (x,), back)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalise the last axis of a (batch, width) input."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return x.tape._record(out, (x, gain, bias), back)


def smooth_l1(diff: Var) -> Var:
    """Elementwise Huber-style smooth-L1 with threshold 1."""
    d = diff.value
    ad = np.abs(d)
    quad = ad < 1.0
    y = np.where(quad, 0.5 * d * d, ad - 0.5)
    return diff.tape._record(y, (diff,), lambda g: (g * np.where(quad, d, np.sign(d)),))


def pseudo_huber_rows(diff: Var, c: float) -> Var:
    """sqrt(||row||^2 + c^2) - c for each row of a (batch, k) difference."""
    d = diff.value
    r = np.sqrt((d * d).sum(axis=-1) + c * c)
    return diff.tape._record(r - c, (diff,), lambda g: ((g / r)[:, None] * d,))


def ste_quantize(x: Var, level: int) -> Var:
    """round(level * tanh(x)) / level, with the tanh derivative passed straight through."""
    y = np.tanh(x.value)
    q = np.round(level * y) / level
    return x.tape._record(q.astype(x.value.dtype, copy=False), (x,), lambda g: (g * (1.0 - y * y),))


def stop_gradient(x: Var) -> Var:
    return x.tape.const(x.value)


def expand_rows(x: Var, reps: int) -> Var:
    """(batch, k) -> (batch * reps, k), each row repeated ``reps`` times consecutively."""
    B, K = x.value.shape
    y = np.repeat(x.value, reps, axis=0)
    return x.tape._record(y, (x,), lambda g: (g.reshape(B, reps, K).sum(axis=1),))


def cumsum(x: Var, axis: int) -> Var:
    def back(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return x.tape._record(np.cumsum(x.value, axis=axis), (x,), back)
