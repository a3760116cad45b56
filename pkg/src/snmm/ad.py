"""Reverse-mode automatic differentiation on array-valued tapes.

A :class:`Tape` records every elementary operation applied to
:class:`AdArray` values together with vector-Jacobian closures; a reverse
sweep then accumulates adjoints. Values carried on the tape may be plain
arrays or :class:`Dual` arrays (primal plus a block of tangent directions).
Running the reverse sweep on a tape whose values are duals gives
forward-over-reverse second derivatives: the adjoint of an input comes back
as a dual whose primal is the gradient and whose tangents are Hessian
columns.

Tapes are rebuilt for every evaluation, so the recorded function may branch
on primal values (knot intervals, stable logistic branches, ...).

All elementwise functions exported here (:func:`exp`, :func:`log`, ...)
dispatch on their argument, so model code written against them runs
unchanged on floats, ``numpy`` arrays and :class:`AdArray` values.
"""

from __future__ import annotations

import numbers

import numpy as np


class DomainError(ArithmeticError):
    """A primitive was evaluated outside its domain."""


# ---------------------------------------------------------------------------
# Dual arrays: primal value ``v`` (shape S) and tangents ``t`` (shape S + (k,))
# ---------------------------------------------------------------------------


def _ex(c):
    """Append a tangent axis to a constant so it broadcasts against tangents."""
    return np.asarray(c)[..., None]


class Dual:
    __slots__ = ("v", "t")
    __array_ufunc__ = None

    def __init__(self, v, t):
        self.v = np.asarray(v, dtype=float)
        self.t = np.asarray(t, dtype=float)

    @property
    def shape(self):
        return self.v.shape

    @property
    def ndim(self):
        return self.v.ndim

    @property
    def k(self):
        return self.t.shape[-1]

    def __repr__(self):
        return f"Dual(v={self.v!r}, t.shape={self.t.shape})"

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v + o.v, self.t + o.t)
        o = np.asarray(o)
        v = self.v + o
        t = self.t if v.shape == self.v.shape else np.broadcast_to(self.t, v.shape + (self.k,))
        return Dual(v, t)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.v, -self.t)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v * o.v, self.t * _ex(o.v) + _ex(self.v) * o.t)
        o = np.asarray(o)
        return Dual(self.v * o, self.t * _ex(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            inv = 1.0 / o.v
            v = self.v * inv
            return Dual(v, (self.t - _ex(v) * o.t) * _ex(inv))
        o = np.asarray(o)
        return Dual(self.v / o, self.t / _ex(o))

    def __rtruediv__(self, o):
        o = np.asarray(o)
        v = o / self.v
        return Dual(v, -_ex(v / self.v) * self.t)

    def __getitem__(self, idx):
        return Dual(self.v[idx], self.t[idx])

    def sum(self, axis=None, keepdims=False):
        if axis is None:
            axis = tuple(range(self.v.ndim))
        elif isinstance(axis, int):
            axis = (axis,)
        axis = tuple(a % self.v.ndim for a in axis) if self.v.ndim else ()
        return Dual(self.v.sum(axis=axis, keepdims=keepdims),
                    self.t.sum(axis=axis, keepdims=keepdims))

    def matmul_const(self, c):
        """``self @ c`` for a constant 2-D ``c``, contracting the last value axis."""
        t = np.moveaxis(np.moveaxis(self.t, -1, 0) @ c, 0, -1)
        return Dual(self.v @ c, t)

    def broadcast_to(self, shape):
        return Dual(np.broadcast_to(self.v, shape), np.broadcast_to(self.t, tuple(shape) + (self.k,)))


def primal(x):
    """Plain ``numpy`` value of a float, array, :class:`Dual` or :class:`AdArray`."""
    if isinstance(x, AdArray):
        x = x.value
    if isinstance(x, Dual):
        return x.v
    return np.asarray(x, dtype=float)


def expand_last(x):
    """Append a unit value axis (``x[..., None]``) without touching tangents."""
    if isinstance(x, Dual):
        return Dual(x.v[..., None], x.t[..., None, :])
    return np.asarray(x)[..., None]


def lift(x, f, df):
    """Apply elementwise ``f`` (derivative ``df``) to an array or a dual."""
    if isinstance(x, Dual):
        return Dual(f(x.v), _ex(df(x.v)) * x.t)
    return f(x)


def _zeros_like(x, shape):
    if isinstance(x, Dual):
        return Dual(np.zeros(shape), np.zeros(tuple(shape) + (x.k,)))
    return np.zeros(shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, numbers.Integral)) or i is None for i in items)


def scatter(g, idx, shape):
    """Adjoint of ``x[idx]``: place ``g`` into zeros of ``shape`` (summing repeats)."""
    z = _zeros_like(g, shape)
    basic = _is_basic_index(idx)
    if isinstance(g, Dual):
        if basic:
            z.v[idx] += g.v
            z.t[idx] += g.t
        else:
            np.add.at(z.v, idx, g.v)
            np.add.at(z.t, idx, g.t)
        return z
    if basic:
        z[idx] += g
    else:
        np.add.at(z, idx, g)
    return z


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    gshape = g.shape if not isinstance(g, numbers.Number) else ()
    if tuple(gshape) == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_back(g, shape, axis, keepdims):
    """Adjoint of a sum reduction: expand ``g`` back to ``shape``."""
    if axis is None:
        return g * np.ones(shape) if not isinstance(g, Dual) else Dual(
            np.broadcast_to(g.v, shape), np.broadcast_to(g.t, tuple(shape) + (g.k,)))
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for a in axes:
            g = Dual(np.expand_dims(g.v, a), np.expand_dims(g.t, a)) if isinstance(g, Dual) \
                else np.expand_dims(g, a)
    if isinstance(g, Dual):
        return g.broadcast_to(shape)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# Tape and taped values
# ---------------------------------------------------------------------------


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[tuple] = []
        self.values: list = []

    def __len__(self):
        return len(self.ops)

    def variable(self, value) -> "AdArray":
        if not isinstance(value, Dual):
            value = np.asarray(value, dtype=float)
        return self.push("var", value, (), ())

    def push(self, op, value, parents, vjps) -> "AdArray":
        idx = len(self.ops)
        self.ops.append(op)
        self.parents.append(tuple(p.index for p in parents))
        self.vjps.append(tuple(vjps))
        self.values.append(value)
        return AdArray(self, idx, value)

    def backward(self, out: "AdArray", seed=None, wrt=None) -> dict:
        """Reverse sweep from ``out``; returns adjoints keyed by node index."""
        if seed is None:
            seed = np.ones(out.shape)
        adj = {out.index: seed}
        keep = set(wrt) if wrt is not None else None
        for i in range(out.index, -1, -1):
            g = adj.get(i)
            if g is None or not self.parents[i]:
                continue
            if keep is None or i not in keep:
                del adj[i]
            for p, vjp in zip(self.parents[i], self.vjps[i]):
                c = vjp(g)
                prev = adj.get(p)
                adj[p] = c if prev is None else prev + c
        return adj


class AdArray:
    """Array-valued quantity recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return len(self.value.shape)

    @property
    def primal(self):
        return primal(self.value)

    def __repr__(self):
        return f"AdArray(#{self.index}, shape={self.shape})"

    def __len__(self):
        return self.shape[0]

    # arithmetic ---------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, a):
        return power(self, a)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, c):
        return matmul(self, c)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, AdArray):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, AdArray) else x


def _shape(x):
    return x.shape if isinstance(x, (AdArray, Dual)) else np.shape(x)


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) + _val(b)
    va, vb = _val(a), _val(b)
    v = va + vb
    parents, vjps = [], []
    if isinstance(a, AdArray):
        sa = _shape(a)
        parents.append(a)
        vjps.append(lambda g: unbroadcast(g, sa))
    if isinstance(b, AdArray):
        sb = _shape(b)
        parents.append(b)
        vjps.append(lambda g: unbroadcast(g, sb))
    return tape.push("add", v, parents, vjps)


def neg(a):
    if not isinstance(a, AdArray):
        return -_val(a)
    return a.tape.push("neg", -a.value, (a,), (lambda g: -g,))


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) - _val(b)
    return add(a, neg(b))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) * _val(b)
    va, vb = _val(a), _val(b)
    v = va * vb
    parents, vjps = [], []
    if isinstance(a, AdArray):
        sa = _shape(a)
        parents.append(a)
        vjps.append(lambda g: unbroadcast(g * vb, sa))
    if isinstance(b, AdArray):
        sb = _shape(b)
        parents.append(b)
        vjps.append(lambda g: unbroadcast(g * va, sb))
    return tape.push("mul", v, parents, vjps)


def _rdiv(num, den):
    """``num / den`` when either side may be a dual."""
    if isinstance(num, Dual) or not isinstance(den, Dual):
        return num / den
    return den.__rtruediv__(num)


def _rmul(a, b):
    if isinstance(a, Dual) or not isinstance(b, Dual):
        return a * b
    return b * a


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _val(a) / _val(b)
    va, vb = _val(a), _val(b)
    if np.any(primal(vb) == 0.0):
        raise DomainError("division by zero")
    v = _rdiv(va, vb)
    parents, vjps = [], []
    if isinstance(a, AdArray):
        sa = _shape(a)
        parents.append(a)
        vjps.append(lambda g: unbroadcast(_rdiv(g, vb), sa))
    if isinstance(b, AdArray):
        sb = _shape(b)
        parents.append(b)
        vjps.append(lambda g: unbroadcast(-_rmul(g, _rdiv(v, vb)), sb))
    return tape.push("div", v, parents, vjps)


def unary(name, x, f, df, d2f, check=None):
    """Elementwise primitive with first and second derivatives.

    The forward value is ``f(x)``; the local partial used in the reverse
    sweep is ``df(x)``, itself lifted with ``d2f`` so that dual-valued tapes
    propagate second-order information.
    """
    pv = primal(_val(x))
    if check is not None:
        check(pv)
    if not isinstance(x, AdArray):
        return lift(x, f, df)
    xv = x.value
    v = lift(xv, f, df)
    return x.tape.push(name, v, (x,), (lambda g: _rmul(g, lift(xv, df, d2f)),))


def _check_log(v):
    if np.any(v <= 0.0):
        raise DomainError("log of a nonpositive value")


def _check_sqrt(v):
    if np.any(v < 0.0):
        raise DomainError("sqrt of a negative value")


def exp(x):
    return unary("exp", x, np.exp, np.exp, np.exp)


def log(x):
    return unary("log", x, np.log, lambda v: 1.0 / v, lambda v: -1.0 / (v * v), _check_log)


def sin(x):
    return unary("sin", x, np.sin, np.cos, lambda v: -np.sin(v))


def cos(x):
    return unary("cos", x, np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v))


def sqrt(x):
    # derivative is singular at 0; domain check excludes only negatives
    return unary("sqrt", x, np.sqrt, lambda v: 0.5 / np.sqrt(v),
                 lambda v: -0.25 / (v * np.sqrt(v)), _check_sqrt)


def square(x):
    return unary("square", x, np.square, lambda v: 2.0 * v, lambda v: 2.0 * np.ones_like(v))


def power(x, a: float):
    """``x ** a`` for a constant real exponent."""
    a = float(a)
    if a == 2.0:
        return square(x)
    if not float(a).is_integer():
        _check_sqrt(primal(_val(x)))
    return unary("pow", x, lambda v: v ** a, lambda v: a * v ** (a - 1.0),
                 lambda v: a * (a - 1.0) * v ** (a - 2.0))


def _ilogit(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _dilogit(v):
    s = _ilogit(v)
    return s * (1.0 - s)


def _d2ilogit(v):
    s = _ilogit(v)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def ilogit(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    return unary("ilogit", x, _ilogit, _dilogit, _d2ilogit)


def smooth_negpart(x, eps: float):
    """``0.5 * (sqrt(x**2 + eps) - x)``: smooth surrogate of ``max(-x, 0)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def f(v):
        return 0.5 * (np.sqrt(v * v + eps) - v)

    def df(v):
        return 0.5 * (v / np.sqrt(v * v + eps) - 1.0)

    def d2f(v):
        return 0.5 * eps / (v * v + eps) ** 1.5

    return unary("smin", x, f, df, d2f)


def getitem(x, idx):
    if not isinstance(x, AdArray):
        return _val(x)[idx]
    shape = x.shape
    return x.tape.push("index", x.value[idx], (x,), (lambda g: scatter(g, idx, shape),))


def reduce_sum(x, axis=None, keepdims=False):
    if not isinstance(x, AdArray):
        v = _val(x)
        return v.sum(axis=axis, keepdims=keepdims) if isinstance(v, Dual) else np.sum(v, axis=axis, keepdims=keepdims)
    shape = x.shape
    v = x.value.sum(axis=axis, keepdims=keepdims)
    return x.tape.push("sum", v, (x,), (lambda g: _broadcast_back(g, shape, axis, keepdims),))


def matmul(x, c):
    """``x @ c`` with ``c`` a constant 1-D or 2-D array."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        return reduce_sum(mul(x, c), axis=-1)
    if not isinstance(x, AdArray):
        v = _val(x)
        return v.matmul_const(c) if isinstance(v, Dual) else v @ c
    ct = c.T
    xv = x.value
    v = xv.matmul_const(c) if isinstance(xv, Dual) else xv @ c
    return x.tape.push("matmul", v, (x,),
                       (lambda g: g.matmul_const(ct) if isinstance(g, Dual) else g @ ct,))


def custom(name, value, parents, vjps):
    """Record a user-defined primitive with explicit vector-Jacobian closures."""
    tape = _tape_of(*parents)
    ad_parents = [p for p in parents if isinstance(p, AdArray)]
    ad_vjps = [f for p, f in zip(parents, vjps) if isinstance(p, AdArray)]
    if tape is None:
        return value
    return tape.push(name, value, ad_parents, ad_vjps)


# ---------------------------------------------------------------------------
# Derivative drivers
# ---------------------------------------------------------------------------


def _scalar_out(out):
    if not isinstance(out, AdArray):
        return None
    if out.shape not in ((), (1,)):
        raise ValueError(f"function must return a scalar, got shape {out.shape}")
    return out


def value_and_grad(f, x):
    x = np.asarray(x, dtype=float)
    tape = Tape()
    xv = tape.variable(x)
    out = _scalar_out(f(xv))
    if out is None:
        return float(np.asarray(f(x)).reshape(())), np.zeros_like(x)
    adj = tape.backward(out, seed=np.ones(out.shape), wrt=[xv.index])
    g = adj.get(xv.index)
    g = np.zeros_like(x) if g is None else np.asarray(g, dtype=float)
    return float(out.primal.reshape(())), g


def grad(f, x):
    """Gradient of scalar ``f`` at ``x`` by one reverse sweep."""
    return value_and_grad(f, x)[1]


def value_grad_hessian(f, x):
    """Value, gradient and Hessian of scalar ``f`` (forward-over-reverse)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    tape = Tape()
    xv = tape.variable(Dual(x, np.eye(n)))
    out = _scalar_out(f(xv))
    if out is None:
        return float(np.asarray(f(x)).reshape(())), np.zeros(n), np.zeros((n, n))
    adj = tape.backward(out, seed=np.ones(out.shape), wrt=[xv.index])
    g = adj.get(xv.index)
    if g is None:
        return float(out.primal.reshape(())), np.zeros(n), np.zeros((n, n))
    if not isinstance(g, Dual):
        return float(out.primal.reshape(())), np.asarray(g, float), np.zeros((n, n))
    return float(out.primal.reshape(())), np.array(g.v), np.array(g.t)


def hessian(f, x):
    return value_grad_hessian(f, x)[2]


def cross_jacobian(g, psi, theta):
    """Mixed second partials ``d^2 g / d psi d theta`` (shape ``len(psi) x len(theta)``).

    Tangent directions are seeded on ``theta`` only; the reverse sweep then
    delivers the ``psi`` adjoint as a dual holding the mixed block.
    """
    psi = np.asarray(psi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    n, k = psi.shape[0], theta.shape[0]
    tape = Tape()
    pv = tape.variable(Dual(psi, np.zeros((n, k))))
    tv = tape.variable(Dual(theta, np.eye(k)))
    out = _scalar_out(g(pv, tv))
    if out is None:
        return np.zeros((n, k))
    adj = tape.backward(out, seed=np.ones(out.shape), wrt=[pv.index])
    a = adj.get(pv.index)
    if not isinstance(a, Dual):
        return np.zeros((n, k))
    return np.array(a.t)


def batched_derivatives(f, z, order: int = 2):
    """Row-wise derivatives of a row-separable function.

    ``f`` maps an ``(N, d)`` input to an ``(N,)`` output where row ``j`` of
    the output depends on row ``j`` of the input only. Returns the values
    ``(N,)``, per-row gradients ``(N, d)`` and, for ``order == 2``, per-row
    Hessians ``(N, d, d)``.
    """
    z = np.asarray(z, dtype=float)
    N, d = z.shape
    tape = Tape()
    if order == 2:
        zv = tape.variable(Dual(z, np.broadcast_to(np.eye(d), (N, d, d))))
    else:
        zv = tape.variable(z)
    out = f(zv)
    if not isinstance(out, AdArray):
        val = np.broadcast_to(primal(out), (N,)).copy()
        return (val, np.zeros((N, d))) + ((np.zeros((N, d, d)),) if order == 2 else ())
    if out.shape != (N,):
        out = out + np.zeros(N)
    adj = tape.backward(out, seed=np.ones(N), wrt=[zv.index])
    a = adj.get(zv.index)
    val = out.primal.copy()
    if a is None:
        a = np.zeros((N, d))
    if order == 2:
        if isinstance(a, Dual):
            return val, np.array(a.v), np.array(a.t)
        return val, np.asarray(a, float), np.zeros((N, d, d))
    return val, np.asarray(primal(a), float)
