"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` is a Wengert list: every primitive appends one node holding its
primal value, references to its operands and a vector-Jacobian product.
:meth:`Tape.backward` walks the list once, in reverse, so every node is visited
exactly once and operands always precede their consumers.

Example
-------
>>> tape = Tape()
>>> x = tape.variable(3.0)
>>> y = x * x
>>> float(tape.backward(y, [x])[0])
6.0
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import special

from .exceptions import NonFiniteGradientError

__all__ = [
    "Tape",
    "Var",
    "finite_diff_check",
]

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_SQRT2 = np.sqrt(2.0)
# beyond this the log-CDF complement is evaluated at the clamp value
Z_CLAMP = 38.0


class Var:
    """A node on a :class:`Tape`.

    Supports the arithmetic operators, ``@``, indexing and ``.T``.  Plain
    numbers and arrays mixed into an expression are treated as constants.
    """

    __slots__ = ("tape", "value", "index")
    __array_priority__ = 100.0

    def __init__(self, tape: "Tape", value: np.ndarray, index: int):
        self.tape = tape
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return vsum(self, axis)


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._names: list[str] = []

    def __len__(self):
        return len(self._values)

    def variable(self, value, name: str = "input") -> Var:
        """Declare a differentiable leaf."""
        return self._push(np.array(value, dtype=float), (), None, name)

    def _push(self, value, parents, vjp, name) -> Var:
        index = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._names.append(name)
        return Var(self, value, index)

    def backward(self, output: Var, wrt: Sequence[Var], check_finite: bool = True) -> list[np.ndarray]:
        """Gradients of the scalar ``output`` with respect to each of ``wrt``.

        Raises
        ------
        NonFiniteGradientError
            If an adjoint becomes NaN or infinite; the message names the first
            offending node in the reverse sweep.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        adjoints: list[np.ndarray | None] = [None] * (output.index + 1)
        adjoints[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            adj = adjoints[i]
            if adj is None or self._vjps[i] is None:
                continue
            if check_finite and not np.all(np.isfinite(adj)):
                raise NonFiniteGradientError(
                    f"non-finite adjoint at node {i} ({self._names[i]})"
                )
            # non-finite results are reported below, so numpy warnings add nothing
            with np.errstate(all="ignore"):
                grads = self._vjps[i](adj)
            for p, g in zip(self._parents[i], grads):
                if g is None:
                    continue
                if check_finite and not np.all(np.isfinite(g)):
                    raise NonFiniteGradientError(
                        f"non-finite adjoint produced by node {i} ({self._names[i]})"
                    )
                if adjoints[p] is None:
                    adjoints[p] = g
                else:
                    adjoints[p] = adjoints[p] + g
        out = []
        for v in wrt:
            g = adjoints[v.index] if v.index < len(adjoints) else None
            g = np.zeros_like(v.value) if g is None else np.asarray(g, dtype=float).reshape(v.value.shape)
            if check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient for leaf {v.index} ({self._names[v.index]})"
                )
            out.append(g)
        return out


# ---------------------------------------------------------------------------
# primitive plumbing


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=float)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _record(name, value, operands, vjp):
    """Append a node if any operand is on a tape; otherwise return the value."""
    tape = _tape_of(*operands)
    if tape is None:
        return value
    parents = []
    fns = []
    for k, op in enumerate(operands):
        if isinstance(op, Var):
            parents.append(op.index)
            fns.append(k)

    def node_vjp(adj):
        grads = vjp(adj)
        return tuple(grads[k] for k in fns)

    return tape._push(np.asarray(value, dtype=float), tuple(parents), node_vjp, name)


def constant_like(x):
    return _val(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv = _val(a), _val(b)
    return _record("add", av + bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _record("sub", av - bv, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _record("neg", -_val(a), (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def power(a, p: float):
    av = _val(a)
    return _record("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a):
    out = np.exp(_val(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def log1p(a):
    av = _val(a)
    return _record("log1p", np.log1p(av), (a,), lambda g: (g / (1.0 + av),))


def sqrt(a):
    out = np.sqrt(_val(a))
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def softplus_value(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_value(x):
    x = np.asarray(x, dtype=float)
    return special.expit(x)


def softplus(a):
    av = _val(a)
    return _record("softplus", softplus_value(av), (a,), lambda g: (g * sigmoid_value(av),))


def sigmoid(a):
    out = sigmoid_value(_val(a))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    av = _val(a)
    return _record("log_sigmoid", -softplus_value(-av), (a,), lambda g: (g * sigmoid_value(-av),))


def maximum(a, floor: float):
    """``max(a, floor)`` with a constant floor; zero gradient where clamped."""
    av = _val(a)
    mask = av > floor
    return _record("maximum", np.where(mask, av, floor), (a,), lambda g: (g * mask,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    av, bv = _val(a), _val(b)
    return _record("where", np.where(cond, av, bv), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape),
                              _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def gammaln(a):
    av = _val(a)
    return _record("gammaln", special.gammaln(av), (a,), lambda g: (g * special.digamma(av),))


# ---------------------------------------------------------------------------
# Gaussian tail


def log_ndtr_complement_value(z):
    """``log(1 - Phi(z))`` evaluated through ``erfcx`` for the upper tail."""
    z = np.clip(np.asarray(z, dtype=float), -Z_CLAMP, Z_CLAMP)
    t = z / _SQRT2
    upper = np.log(0.5) + np.log(special.erfcx(np.maximum(t, 0.0))) - np.maximum(t, 0.0) ** 2
    lower = np.log1p(-0.5 * special.erfc(np.maximum(-t, 0.0)))
    return np.where(t > 0.0, upper, lower)


def inverse_mills(z):
    """``phi(z) / (1 - Phi(z))`` computed in log space."""
    z = np.clip(np.asarray(z, dtype=float), -Z_CLAMP, Z_CLAMP)
    return np.exp(-0.5 * z * z - _LOG_SQRT_2PI - log_ndtr_complement_value(z))


def log_ndtr_complement(a):
    av = _val(a)
    inside = np.abs(av) <= Z_CLAMP
    return _record("log_ndtr_complement", log_ndtr_complement_value(av), (a,),
                   lambda g: (-g * inverse_mills(av) * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def vsum(a, axis=None):
    av = _val(a)
    shape = av.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", av.sum(axis=axis), (a,), vjp)


def mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return vsum(a, axis) * (1.0 / n)


def transpose(a):
    return _record("transpose", _val(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = _val(a)
    return _record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key):
    av = _val(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _record("getitem", av[key], (a,), vjp)


def concatenate(parts, axis=0):
    vals = [_val(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concatenate", np.concatenate(vals, axis=axis), tuple(parts), vjp)


def stack(parts, axis=0):
    vals = [_val(p) for p in parts]

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(vals)))

    return _record("stack", np.stack(vals, axis=axis), tuple(parts), vjp)


def diag(a):
    """Diagonal of a square matrix."""
    av = _val(a)
    return _record("diag", np.diagonal(av).copy(), (a,), lambda g: (np.diag(g),))


def tril_from_parts(log_diag, strict_lower, n: int):
    """Lower-triangular matrix with ``exp(log_diag)`` on the diagonal.

    ``strict_lower`` holds the ``n(n-1)/2`` entries below the diagonal in
    row-major order.
    """
    rows, cols = np.tril_indices(n, -1)
    dv, sv = _val(log_diag), _val(strict_lower)
    ed = np.exp(dv)
    out = np.zeros((n, n))
    out[rows, cols] = sv
    out[np.arange(n), np.arange(n)] = ed
    return _record("tril_from_parts", out, (log_diag, strict_lower),
                   lambda g: (np.diagonal(g) * ed, g[rows, cols]))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), vjp)


def kron(a, b):
    """Kronecker product of two matrices."""
    av, bv = _val(a), _val(b)
    m, n = av.shape
    p, q = bv.shape

    def vjp(g):
        g4 = g.reshape(m, p, n, q)
        return np.einsum("ipjq,pq->ij", g4, bv), np.einsum("ipjq,ij->pq", g4, av)

    return _record("kron", np.kron(av, bv), (a, b), vjp)


def _phi(m):
    """Lower triangle with the diagonal halved."""
    out = np.tril(m)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a, factor=None):
    """Lower Cholesky factor with a reverse rule that only uses triangular solves.

    ``factor`` may pass an already computed factor of ``a`` to skip the
    forward factorization.  Raises ``numpy.linalg.LinAlgError`` if the matrix
    is not positive definite.
    """
    L = np.linalg.cholesky(_val(a)) if factor is None else factor

    def vjp(g):
        P = _phi(L.T @ g)
        tmp = sla.solve_triangular(L, P.T, lower=True, trans="T", check_finite=False)
        abar = sla.solve_triangular(L, tmp.T, lower=True, trans="T", check_finite=False)
        return (0.5 * (abar + abar.T),)

    return _record("cholesky", L, (a,), vjp)


def solve_triangular(L, b, trans: bool = False):
    """Solve ``L x = b`` (or ``L^T x = b`` with ``trans``) for lower-triangular ``L``."""
    Lv, bv = _val(L), _val(b)
    t = "T" if trans else "N"
    x = sla.solve_triangular(Lv, bv, lower=True, trans=t, check_finite=False)

    def vjp(g):
        bbar = sla.solve_triangular(Lv, g, lower=True, trans="N" if trans else "T", check_finite=False)
        if bv.ndim == 1:
            outer = np.outer(x, bbar) if trans else np.outer(bbar, x)
        else:
            outer = x @ bbar.T if trans else bbar @ x.T
        return -np.tril(outer), bbar

    return _record("solve_triangular", x, (L, b), vjp)


def logdet_from_cholesky(L):
    """``log det(L L^T)`` for a lower-triangular factor with positive diagonal."""
    Lv = _val(L)
    d = np.diagonal(Lv)
    return _record("logdet", 2.0 * np.sum(np.log(d)), (L,), lambda g: (np.diag(2.0 * g / d),))


def custom(name, value, operands, vjp):
    """Record a user-defined primitive; ``vjp(g)`` returns one gradient per operand."""
    return _record(name, value, tuple(operands), vjp)


# ---------------------------------------------------------------------------


def finite_diff_check(loss: Callable[[np.ndarray], float], grad: np.ndarray | Callable, point, h: float = 1e-5) -> float:
    """Largest relative discrepancy between a gradient and central differences.

    ``grad`` is either the gradient at ``point`` or a callable producing it.
    The per-coordinate error is ``|g_ad - g_fd| / max(1, |g_fd|)``.
    """
    point = np.asarray(point, dtype=float)
    g_ad = np.asarray(grad(point) if callable(grad) else grad, dtype=float).ravel()
    worst = 0.0
    for i in range(point.size):
        e = np.zeros_like(point).ravel()
        e[i] = h
        e = e.reshape(point.shape)
        g_fd = (loss(point + e) - loss(point - e)) / (2.0 * h)
        worst = max(worst, abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd)))
    return worst
