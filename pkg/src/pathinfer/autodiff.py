"""Tape-based reverse-mode differentiation over numpy arrays.

Only the primitives the encoder and the walk losses need are provided.
A :class:`Var` joins a tape when it is created by :meth:`Tape.leaf` or
produced by an op whose inputs sit on a tape; everything else is a constant
and costs no bookkeeping.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "grad", "tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, tape=None, grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.grad = grad

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, taped={self.tape is not None})"

    def item(self):
        return float(self.value)

    def __float__(self):
        return float(self.value)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)


class Tape:
    """Ordered record of executed ops, replayed backwards by :func:`backward`."""

    def __init__(self):
        self.ops = []
        self.stores = []

    def __len__(self):
        return len(self.ops)

    def record(self, out, parents, vjp):
        self.ops.append((out, parents, vjp))
        return out

    def leaf(self, value, grad=None):
        """Differentiable input. ``grad`` may be a buffer to accumulate into."""
        return Var(value, self, grad)

    def watch(self, store):
        if all(s is not store for s in self.stores):
            self.stores.append(store)


def backward(tape: Tape, seed=1.0, output: Var | None = None, accumulate=False):
    """Propagate ``seed * d(output)`` to every leaf on ``tape``.

    Parameter stores registered on the tape have their gradient buffers
    zeroed first unless ``accumulate`` is set. The tape is emptied.
    """
    if not tape.ops:
        raise ValueError("backward called on an empty tape")
    if output is None:
        output = tape.ops[-1][0]
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
    if not accumulate:
        for store in tape.stores:
            store.zero_grad()
    output.grad = np.full(output.value.shape, float(seed))
    for out, parents, vjp in reversed(tape.ops):
        g = out.grad
        if g is None:
            continue
        grads = vjp(g)
        for p, gp in zip(parents, grads):
            if gp is None or p.tape is not tape:
                continue
            if p.grad is None:
                p.grad = np.array(gp, dtype=np.float64, copy=True).reshape(p.value.shape)
            else:
                p.grad += np.reshape(gp, p.value.shape)
        if out is not output:
            out.grad = None
    tape.ops.clear()
    tape.stores.clear()


# ---------------------------------------------------------------- helpers

def lift(x):
    return x if isinstance(x, Var) else Var(x)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _op(out_value, parents, vjp):
    tape = _tape(*parents)
    out = Var(out_value, tape)
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a):
    a = lift(a)
    return _op(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _op(out, (a, b),
               lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


_kink_log = None


class track_kinks:
    """Collects every ReLU activation pattern produced inside the block."""

    def __enter__(self):
        global _kink_log
        self._saved, _kink_log = _kink_log, []
        return _kink_log

    def __exit__(self, *exc):
        global _kink_log
        _kink_log = self._saved


def relu(a):
    a = lift(a)
    mask = a.value > 0  # subgradient 0 at 0
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask).tobytes())
    return _op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = lift(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = lift(a)
    out = np.exp(a.value)
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    a = lift(a)
    x = a.value
    return _op(np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    a = lift(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _op(a.value.sum(axis=axis), (a,), vjp)


def reshape(a, shape):
    a = lift(a)
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(xs, axis=1):
    xs = [lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _op(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), vjp)


def matmul(a, b):
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        if av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = av.T @ g
        return ga, gb

    return _op(av @ bv, (a, b), vjp)


def gather(a, index):
    """Rows ``a[index]`` along axis 0."""
    a = lift(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        if len(shape) == 1:
            out += np.bincount(index, weights=g, minlength=shape[0])
        else:
            np.add.at(out, index, g)
        return (out,)

    return _op(a.value[index], (a,), vjp)


def segment_sum(a, segments, num_segments):
    """``out[s] = sum(a[i] for i with segments[i] == s)`` along axis 0."""
    a = lift(a)
    segments = np.asarray(segments, dtype=np.int64)
    if a.value.ndim == 1:
        out = np.bincount(segments, weights=a.value, minlength=num_segments)
    else:
        out = np.zeros((num_segments,) + a.shape[1:])
        np.add.at(out, segments, a.value)
    return _op(out, (a,), lambda g: (g[segments],))


def spmm(weights, rows, cols, shape, x):
    """Sparse product ``A @ x`` with ``A[rows[e], cols[e]] = weights[e]``.

    Differentiable in both ``weights`` and ``x``.
    """
    weights, x = lift(weights), lift(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    A = sp.csr_matrix((weights.value, (rows, cols)), shape=shape)
    xv = x.value

    def vjp(g):
        gx = A.T @ g
        if xv.ndim == 1:
            gw = g[rows] * xv[cols]
        else:
            gw = np.einsum("ij,ij->i", g[rows], xv[cols])
        return gw, gx

    return _op(A @ xv, (weights, x), vjp)
