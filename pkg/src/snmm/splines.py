"""B-spline bases, difference penalties and the mixed-model split of a P-spline.

A penalized spline ``f(u) = sum_k theta_k B_k(u)`` with penalty
``lam * theta' S theta`` is rewritten through the eigendecomposition of
``S`` as ``theta = T_F theta_F + T_R omega`` so that the penalty becomes
``lam * |omega|^2``: ``theta_F`` spans the null space (fixed effects) and
``omega`` the penalized directions (random effects with precision ``lam``).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .linalg import sym_eigen

ZERO_EIG_REL = 1e-10


class OutOfDomain(ValueError):
    """Evaluation point outside the knot span with extrapolation disabled."""


class InvalidOrder(ValueError):
    pass


class DegenerateRange(ValueError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Clamped B-spline basis with equally spaced interior knots on ``[lower, upper]``."""

    n_interior: int = 10
    lower: float = 0.0
    upper: float = 1.0
    degree: int = 3

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"empty domain [{self.lower}, {self.upper}]")
        if self.degree < 0 or self.n_interior < 0:
            raise ValueError("degree and interior knot count must be nonnegative")
        if self.n_basis < self.degree + 2:
            raise ValueError("basis needs at least degree + 2 functions")

    @property
    def n_basis(self) -> int:
        return self.n_interior + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        inner = np.linspace(self.lower, self.upper, self.n_interior + 2)
        p = self.degree
        return np.concatenate([[self.lower] * p, inner, [self.upper] * p])


def _check_domain(spec: BasisSpec, u: np.ndarray, extrapolate: bool) -> None:
    if extrapolate:
        return
    if np.any(u < spec.lower) or np.any(u > spec.upper) or not np.all(np.isfinite(u)):
        bad = u[(u < spec.lower) | (u > spec.upper) | ~np.isfinite(u)]
        raise OutOfDomain(
            f"{bad.size} point(s) outside [{spec.lower}, {spec.upper}], e.g. {bad[0]!r}")


def _degree0(t: np.ndarray, u: np.ndarray) -> np.ndarray:
    B = ((t[:-1] <= u[:, None]) & (u[:, None] < t[1:])).astype(float)
    # right end of the span belongs to the last nonempty interval
    last = np.nonzero(t[:-1] < t[1:])[0][-1]
    B[u == t[-1], last] = 1.0
    return B


def _safe_inv(d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    nz = d > 0
    out[nz] = 1.0 / d[nz]
    return out


def _cox_de_boor(t: np.ndarray, u: np.ndarray, degree: int) -> np.ndarray:
    B = _degree0(t, u)
    for d in range(1, degree + 1):
        n = len(t) - d - 1
        left = (u[:, None] - t[:n]) * _safe_inv(t[d:d + n] - t[:n])
        right = (t[d + 1:d + 1 + n] - u[:, None]) * _safe_inv(t[d + 1:d + 1 + n] - t[1:n + 1])
        B = left * B[:, :-1] + right * B[:, 1:]
    return B


def _basis_deriv(t: np.ndarray, u: np.ndarray, degree: int, deriv: int) -> np.ndarray:
    if deriv == 0:
        return _cox_de_boor(t, u, degree)
    if deriv > degree:
        return np.zeros((u.size, len(t) - degree - 1))
    lower = _basis_deriv(t, u, degree - 1, deriv - 1)
    n = len(t) - degree - 1
    a = degree * _safe_inv(t[degree:degree + n] - t[:n])
    b = degree * _safe_inv(t[degree + 1:degree + 1 + n] - t[1:n + 1])
    return lower[:, :-1] * a - lower[:, 1:] * b


def _numeric_basis(spec: BasisSpec, u: np.ndarray, deriv: int, extrapolate: bool) -> np.ndarray:
    t = spec.knots
    if not extrapolate:
        return _basis_deriv(t, u, spec.degree, deriv)
    uc = np.clip(u, spec.lower, spec.upper)
    off = (u - uc)[:, None]
    # continue the boundary polynomial piece, so the curve stays smooth across the ends
    out = np.zeros((u.size, spec.n_basis))
    for k in range(deriv, spec.degree + 1):
        out += _basis_deriv(t, uc, spec.degree, k) * off ** (k - deriv) / math.factorial(k - deriv)
    return out


def basis_matrix(spec: BasisSpec, u, deriv: int = 0, extrapolate: bool = False):
    """Rows ``B_k^{(deriv)}(u_i)`` of the basis at the points ``u``.

    ``u`` may be a 1-D array or an :class:`~snmm.ad.AdArray`; in the latter
    case the Cox-de Boor recursion runs on taped values (``deriv`` must be 0)
    so derivatives with respect to the evaluation points flow through.
    """
    if deriv < 0 or deriv > spec.degree:
        raise ValueError(f"deriv must be in [0, {spec.degree}]")
    if isinstance(u, ad.AdArray):
        if deriv != 0 or extrapolate:
            raise ValueError("taped evaluation supports deriv=0 inside the domain only")
        return _taped_basis(spec, u)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    _check_domain(spec, u, extrapolate)
    return _numeric_basis(spec, u, deriv, extrapolate)


def _taped_basis(spec: BasisSpec, u: "ad.AdArray"):
    t = spec.knots
    up = u.primal
    _check_domain(spec, up, False)
    uc = u[:, None]
    B = _degree0(t, up)
    for d in range(1, spec.degree + 1):
        n = len(t) - d - 1
        left = (uc - t[:n]) * _safe_inv(t[d:d + n] - t[:n])
        right = (t[d + 1:d + 1 + n] - uc) * _safe_inv(t[d + 1:d + 1 + n] - t[1:n + 1])
        B = left * B[:, :-1] + right * B[:, 1:]
    return B


def spline_eval(spec: BasisSpec, u, coef, extrapolate: bool = False):
    """``f(u) = B(u) @ coef`` as a single taped primitive.

    The partial derivatives come from the analytic derivative recursion
    (``B'`` and ``B''``), so the result is exact to rounding and agrees with
    running the recursion on taped values. ``u`` is 1-D of length ``N``;
    ``coef`` has shape ``(K,)`` or ``(N, K)``.
    """
    uv = u.value if isinstance(u, ad.AdArray) else u
    cv = coef.value if isinstance(coef, ad.AdArray) else coef
    up = np.atleast_1d(ad.primal(uv))
    cp = ad.primal(cv)
    _check_domain(spec, up, extrapolate)
    B0 = _numeric_basis(spec, up, 0, extrapolate)
    B1 = _numeric_basis(spec, up, 1, extrapolate)
    B2 = _numeric_basis(spec, up, 2, extrapolate) if spec.degree >= 2 else np.zeros_like(B0)
    f0 = (B0 * cp).sum(-1)
    f1 = (B1 * cp).sum(-1)
    u_dual = isinstance(uv, ad.Dual)
    c_dual = isinstance(cv, ad.Dual)
    if not (isinstance(u, ad.AdArray) or isinstance(coef, ad.AdArray)):
        value = f0
        if u_dual or c_dual:
            k = uv.k if u_dual else cv.k
            t = np.zeros(f0.shape + (k,))
            if u_dual:
                t = t + f1[:, None] * uv.t
            if c_dual:
                t = t + (B0[..., None] * cv.t).sum(-2)
            value = ad.Dual(f0, t)
        return value

    if u_dual or c_dual:
        k = uv.k if u_dual else cv.k
        t = np.zeros(f0.shape + (k,))
        if u_dual:
            t = t + f1[:, None] * uv.t
        if c_dual:
            t = t + (B0[..., None] * cv.t).sum(-2)
        value = ad.Dual(f0, t)
        f2 = (B2 * cp).sum(-1)
        tu = np.zeros(f0.shape + (k,))
        if u_dual:
            tu = tu + f2[:, None] * uv.t
        if c_dual:
            tu = tu + (B1[..., None] * cv.t).sum(-2)
        p_u = ad.Dual(f1, tu)
        p_c = ad.Dual(B0, B1[..., None] * uv.t[:, None, :]) if u_dual else B0
    else:
        value = f0
        p_u = f1
        p_c = B0

    cshape = np.shape(cp)
    return ad.custom(
        "spline", value, (u, coef),
        (lambda g: g * p_u,
         lambda g: ad.unbroadcast(ad.expand_last(g) * p_c, cshape)))


def difference_penalty(K: int, order: int = 2) -> np.ndarray:
    """``D' D`` for the ``order``-th difference matrix ``D``; ``order == 0`` gives no penalty."""
    if order < 0 or (order > 0 and order >= K):
        raise InvalidOrder(f"difference order {order} invalid for {K} coefficients")
    if order == 0:
        return np.zeros((K, K))
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D


@dataclass(frozen=True)
class PenaltyDecomposition:
    """``S = U diag(d) U'`` split into penalized (first ``r``) and null columns."""

    S: np.ndarray
    U: np.ndarray
    d_plus: np.ndarray

    @property
    def r(self) -> int:
        return int(self.d_plus.size)

    @property
    def null_dim(self) -> int:
        return self.U.shape[1] - self.r

    @property
    def U_R(self) -> np.ndarray:
        return self.U[:, :self.r]

    @property
    def U_F(self) -> np.ndarray:
        return self.U[:, self.r:]

    def fixed_design(self, X):
        return np.asarray(X) @ self.U_F

    def random_design(self, X):
        return np.asarray(X) @ self.U_R / np.sqrt(self.d_plus)

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.U_F.T @ theta, np.sqrt(self.d_plus) * (self.U_R.T @ theta)

    def join(self, theta_F, omega):
        return self.U_F @ np.asarray(theta_F) + self.U_R @ (np.asarray(omega) / np.sqrt(self.d_plus))


def decompose(S) -> PenaltyDecomposition:
    """Eigen-split of a PSD penalty at threshold ``1e-10 * largest eigenvalue``."""
    S = np.asarray(S, dtype=float)
    eig = sym_eigen(S)
    lam_max = eig.values[0] if eig.values.size else 0.0
    if lam_max <= 0:
        r = 0
    else:
        r = int(np.sum(eig.values > ZERO_EIG_REL * lam_max))
    return PenaltyDecomposition(S=S, U=eig.vectors, d_plus=eig.values[:r].copy())


def sum_to_zero_basis(spec: BasisSpec, n_grid: int = 1001) -> np.ndarray:
    """Columns spanning coefficient vectors whose curve averages to zero on the domain."""
    grid = np.linspace(spec.lower, spec.upper, n_grid)
    c = basis_matrix(spec, grid).mean(axis=0)
    Q, _ = np.linalg.qr(c[:, None], mode="complete")
    return Q[:, 1:]


@dataclass(frozen=True)
class PenalizedSpline:
    """Basis plus (optional) centering constraint plus mixed-model split.

    Full coefficients are ``theta = T_F @ theta_F + T_R @ omega``.
    """

    basis: BasisSpec
    penalty_order: int = 2
    sum_to_zero: bool = False
    decomposition: PenaltyDecomposition = field(init=False)
    Z: np.ndarray = field(init=False)

    def __post_init__(self):
        K = self.basis.n_basis
        S = difference_penalty(K, self.penalty_order)
        Z = sum_to_zero_basis(self.basis) if self.sum_to_zero else np.eye(K)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "decomposition", decompose(Z.T @ S @ Z))

    @property
    def K(self) -> int:
        return self.basis.n_basis

    @property
    def r(self) -> int:
        return self.decomposition.r

    @property
    def null_dim(self) -> int:
        return self.decomposition.null_dim

    @property
    def T_F(self) -> np.ndarray:
        return self.Z @ self.decomposition.U_F

    @property
    def T_R(self) -> np.ndarray:
        dec = self.decomposition
        return self.Z @ dec.U_R / np.sqrt(dec.d_plus)

    @property
    def S(self) -> np.ndarray:
        return difference_penalty(self.K, self.penalty_order)

    def coefficients(self, theta_F, omega):
        """Full coefficient vector(s); works on arrays and taped values.

        Inputs may carry a leading batch axis (shape ``(N, null_dim)`` and
        ``(N, r)``).
        """
        parts = []
        if self.null_dim:
            parts.append(ad.matmul(theta_F, self.T_F.T))
        if self.r:
            parts.append(ad.matmul(omega, self.T_R.T))
        if not parts:
            return np.zeros(self.K)
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def split(self, theta):
        """Least-squares inverse of :meth:`coefficients` (exact on the constrained space)."""
        T = np.hstack([self.T_F, self.T_R])
        sol, *_ = np.linalg.lstsq(T, np.asarray(theta, dtype=float), rcond=None)
        return sol[:self.null_dim], sol[self.null_dim:]


@dataclass(frozen=True)
class ScaledArgument:
    value: object
    lower: object
    upper: object


def gamma_star(gamma, t_min, t_max, sigma_shift, c: float = 3.0) -> ScaledArgument:
    """Map ``gamma`` to ``[0, 1]`` using bounds widened by ``c`` shift standard deviations.

    The bounds are smooth in ``sigma_shift`` so the mapping can be
    differentiated with respect to the variance parameters.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    if np.any(ad.primal(sigma_shift) < 0):
        raise ValueError("sigma_shift must be nonnegative")
    lo = t_min - c * sigma_shift
    hi = t_max + c * sigma_shift
    width = hi - lo
    if np.any(ad.primal(width) < 1e-12):
        raise DegenerateRange("max gamma - min gamma below 1e-12")
    return ScaledArgument(value=(gamma - lo) / width, lower=lo, upper=hi)


def monotonicity_grid(spec: BasisSpec, M: int) -> np.ndarray:
    if M < 2:
        raise ValueError("grid needs at least two points")
    return np.linspace(spec.lower, spec.upper, M)
