"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op accepts plain arrays or :class:`Tensor` operands. When no operand
carries a gradient the op returns a plain ``ndarray``, so numerical code
written against these functions runs on the fast path unchanged and gets
recorded on the tape only when differentiable inputs are present.
"""
from __future__ import annotations

import itertools
import warnings

import numpy as np
import scipy.linalg

_ids = itertools.count()


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when a linear solve cannot be completed."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class Tensor:
    """A value buffer plus its node on the gradient tape."""

    __array_ufunc__ = None  # make numpy defer to the reflected operators below
    __slots__ = ("value", "requires_grad", "parents", "vjp", "id")

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.id = next(_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x):
    """Strip the tape: return the underlying array."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def is_tracked(x):
    return isinstance(x, Tensor) and x.requires_grad


def variable(value):
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _record(value, operands, vjp):
    # vjp(g, needs) -> per-operand gradient (None where needs[i] is False)
    needs = tuple(is_tracked(x) for x in operands)
    if not any(needs):
        return value
    parents = tuple(x for x, n in zip(operands, needs) if n)

    def backward(g):
        grads = vjp(g, needs)
        return [gr for gr, n in zip(grads, needs) if n]

    return Tensor(value, True, parents, backward)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av + bv, (a, b), lambda g, n: (
        _unbroadcast(g, av.shape) if n[0] else None,
        _unbroadcast(g, bv.shape) if n[1] else None))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av - bv, (a, b), lambda g, n: (
        _unbroadcast(g, av.shape) if n[0] else None,
        _unbroadcast(-g, bv.shape) if n[1] else None))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av * bv, (a, b), lambda g, n: (
        _unbroadcast(g * bv, av.shape) if n[0] else None,
        _unbroadcast(g * av, bv.shape) if n[1] else None))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _record(out, (a, b), lambda g, n: (
        _unbroadcast(g / bv, av.shape) if n[0] else None,
        _unbroadcast(-g * out / bv, bv.shape) if n[1] else None))


def neg(a):
    return _record(-value_of(a), (a,), lambda g, n: (-g,))


def power(a, p):
    """``a ** p`` for a constant real exponent."""
    av = value_of(a)
    out = av ** p
    return _record(out, (a,), lambda g, n: (g * p * av ** (p - 1),))


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, (a,), lambda g, n: (g * out,))


def log(a):
    av = value_of(a)
    return _record(np.log(av), (a,), lambda g, n: (g / av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _record(out, (a,), lambda g, n: (g / (2.0 * out),))


def maximum(a, floor):
    """Clamp from below by a constant; the gradient passes where ``a > floor``."""
    av = value_of(a)
    mask = av > floor
    return _record(np.where(mask, av, floor), (a,), lambda g, n: (g * mask,))


def leaky_relu(a, slope=0.2):
    av = value_of(a)
    scale = np.where(av > 0, 1.0, slope)
    return _record(av * scale, (a,), lambda g, n: (g * scale,))


def reciprocal_clamped(a, threshold=1e-12, big=1e12):
    """``1/a`` where ``a > threshold``, otherwise the constant ``big``."""
    av = value_of(a)
    mask = av > threshold
    safe = np.where(mask, av, 1.0)
    out = np.where(mask, 1.0 / safe, big)
    return _record(out, (a,), lambda g, n: (np.where(mask, -g / (safe * safe), 0.0),))


# -- reductions and shape ops -------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g, n):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    count = value_of(a).size if axis is None else value_of(a).shape[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(count))


def max_reduce(a, axis):
    """Elementwise max along ``axis``; at ties the gradient goes to the lowest index."""
    av = value_of(a)
    idx = np.expand_dims(np.argmax(av, axis=axis), axis)
    out = np.take_along_axis(av, idx, axis=axis).squeeze(axis)

    def vjp(g, n):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), vjp)


def concat(parts, axis=-1):
    values = [value_of(p) for p in parts]
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g, n):
        return [gi if ni else None for gi, ni in zip(np.split(g, bounds, axis=axis), n)]

    return _record(np.concatenate(values, axis=axis), tuple(parts), vjp)


def getitem(a, key):
    av = value_of(a)

    def vjp(g, n):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return _record(av[key], (a,), vjp)


def transpose(a):
    return _record(value_of(a).T, (a,), lambda g, n: (g.T,))


def reshape(a, shape):
    av = value_of(a)
    return _record(av.reshape(shape), (a,), lambda g, n: (g.reshape(av.shape),))


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    return _record(av @ bv, (a, b), lambda g, n: (
        g @ bv.T if n[0] else None,
        av.T @ g if n[1] else None))


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale rows to unit Euclidean norm."""
    av = value_of(a)
    norm = np.maximum(np.sqrt((av * av).sum(axis=axis, keepdims=True)), eps)
    out = av / norm

    def vjp(g, n):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, (a,), vjp)


def _factorize(A, symmetric):
    if symmetric:
        try:
            return ("cho", scipy.linalg.cho_factor(A, check_finite=False))
        except np.linalg.LinAlgError:
            jittered = A + 1e-10 * np.eye(len(A))
            try:
                return ("cho", scipy.linalg.cho_factor(jittered, check_finite=False))
            except np.linalg.LinAlgError:
                pass
    else:
        with warnings.catch_warnings():
            # singularity is reported below with a condition estimate
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(A, check_finite=False)
        if np.all(np.abs(np.diag(lu[0])) > 0):
            return ("lu", lu)
    raise SingularSystemError(
        f"singular linear system (condition estimate {np.linalg.cond(A):.3e})",
        condition=float(np.linalg.cond(A)))


def _apply(fact, B, trans=False):
    kind, f = fact
    if kind == "cho":
        return scipy.linalg.cho_solve(f, B, check_finite=False)
    return scipy.linalg.lu_solve(f, B, trans=1 if trans else 0, check_finite=False)


def solve(A, B, symmetric=False):
    """Solve ``A X = B``.

    Symmetric systems go through a Cholesky factorization, retried once with
    a 1e-10 diagonal jitter. The backward pass reuses the factorization:
    ``dB = A^-T g`` and ``dA = -dB X^T``.
    """
    Av, Bv = value_of(A), value_of(B)
    if not (np.all(np.isfinite(Av)) and np.all(np.isfinite(Bv))):
        raise ValueError("non-finite input to linear solve")
    fact = _factorize(Av, symmetric)
    X = _apply(fact, Bv)

    def vjp(g, n):
        gB = _apply(fact, g, trans=True)
        gA = -np.outer(gB, X) if X.ndim == 1 else -gB @ X.T
        return (gA if n[0] else None, gB if n[1] else None)

    return _record(X, (A, B), vjp)


# -- backward pass ------------------------------------------------------------

def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Nodes are visited once each, in reverse topological order. Inputs that
    do not influence the output get a zero array.
    """
    wrt = list(wrt)
    if not is_tracked(output):
        return [np.zeros_like(value_of(w)) for w in wrt]
    if output.value.size != 1:
        raise ValueError("grad() needs a scalar output")
    grads = {output.id: np.ones_like(output.value)}
    leaves = {}
    for node in reversed(_topological(output)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.vjp is None:
            leaves[node.id] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            pg = np.asarray(pg, dtype=np.float64)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return [leaves.get(w.id, np.zeros_like(w.value)) if isinstance(w, Tensor)
            else np.zeros_like(value_of(w)) for w in wrt]
