"""Joint negative log-density, Laplace approximation and maximum likelihood fitting.

Parameter layout
----------------
``theta`` (fixed parameters, optimized by the outer loop)::

    [theta_F (null-space spline coefs), beta, log sigma, log g_1..g_q, log sigma_omega]

where the random effects satisfy ``b_i ~ N(0, sigma^2 diag(g)^2)`` and the
penalized spline coefficients ``omega ~ N(0, sigma_omega^2 I)``, i.e. the
smoothing parameter is ``lambda = sigma_omega^-2``. ``log sigma_omega`` is
present only when the penalty has a nonzero rank.

``psi`` (random effects, integrated out by the Laplace approximation)::

    [b_1 (q values), ..., b_m, omega]
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ad
from .linalg import NotPositiveDefinite, cholesky
from .rng import stream
from .model import (Bindings, Dataset, FitSpec, Scaled, UnboundName, eval_expr,
                    spline_node)
from .splines import (DegenerateRange, OutOfDomain, PenalizedSpline, basis_matrix,
                      gamma_star, monotonicity_grid, spline_eval)

LOG2PI = math.log(2.0 * math.pi)

# evaluation failures that make a trial point infeasible rather than fatal
INFEASIBLE = (ad.DomainError, OutOfDomain, DegenerateRange, FloatingPointError, OverflowError)


class InnerFailure(RuntimeError):
    """The conditional mode of the random effects could not be located."""


class InnerDivergence(InnerFailure):
    pass


class IndefiniteModeHessian(InnerFailure):
    pass


class InfeasibleStart(InnerFailure):
    pass


class SingularDesign(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    n_fixed_spline: int
    p: int
    q: int
    r: int
    m: int
    beta_labels: tuple = ()
    b_labels: tuple = ()

    @property
    def theta_F(self) -> slice:
        return slice(0, self.n_fixed_spline)

    @property
    def beta(self) -> slice:
        return slice(self.n_fixed_spline, self.n_fixed_spline + self.p)

    @property
    def log_sigma(self) -> int:
        return self.n_fixed_spline + self.p

    @property
    def log_g(self) -> slice:
        return slice(self.log_sigma + 1, self.log_sigma + 1 + self.q)

    @property
    def log_sigma_omega(self) -> Optional[int]:
        return self.log_sigma + 1 + self.q if self.r else None

    @property
    def n_theta(self) -> int:
        return self.n_fixed_spline + self.p + 1 + self.q + (1 if self.r else 0)

    @property
    def n_b(self) -> int:
        return self.m * self.q

    @property
    def n_psi(self) -> int:
        return self.m * self.q + self.r

    @property
    def theta_labels(self) -> list[str]:
        labels = [f"theta_F{i}" for i in range(self.n_fixed_spline)]
        labels += [f"beta{j}" for j in self.beta_labels]
        labels.append("log_sigma")
        labels += [f"log_g_b{k}" for k in self.b_labels]
        if self.r:
            labels.append("log_sigma_omega")
        return labels


@dataclass
class ParamVector:
    """Named view of ``theta``."""

    theta_F: np.ndarray
    beta: np.ndarray
    log_sigma: float
    log_g: np.ndarray
    log_sigma_omega: Optional[float] = None

    def __post_init__(self):
        vals = [self.theta_F, self.beta, self.log_sigma, self.log_g]
        if self.log_sigma_omega is not None:
            vals.append(self.log_sigma_omega)
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ValueError("parameter vector has non-finite entries")

    @classmethod
    def from_array(cls, layout: Layout, theta) -> "ParamVector":
        theta = np.asarray(theta, dtype=float)
        so = layout.log_sigma_omega
        return cls(theta_F=theta[layout.theta_F].copy(), beta=theta[layout.beta].copy(),
                   log_sigma=float(theta[layout.log_sigma]), log_g=theta[layout.log_g].copy(),
                   log_sigma_omega=None if so is None else float(theta[so]))

    def to_array(self) -> np.ndarray:
        parts = [self.theta_F, self.beta, [self.log_sigma], self.log_g]
        if self.log_sigma_omega is not None:
            parts.append([self.log_sigma_omega])
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    @property
    def sigma_b(self) -> np.ndarray:
        """Absolute random-effect standard deviations ``sigma * g_k``."""
        return np.exp(self.log_sigma + self.log_g)

    @property
    def smoothing(self) -> Optional[float]:
        """``lambda = sigma_omega^-2``."""
        return None if self.log_sigma_omega is None else math.exp(-2.0 * self.log_sigma_omega)


@dataclass
class RandomVector:
    b: np.ndarray  # (m, q)
    omega: np.ndarray  # (r,)

    @classmethod
    def from_array(cls, layout: Layout, psi) -> "RandomVector":
        psi = np.asarray(psi, dtype=float)
        return cls(b=psi[:layout.n_b].reshape(layout.m, layout.q).copy(),
                   omega=psi[layout.n_b:].copy())

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.b.ravel(), self.omega])


@dataclass
class LaplaceState:
    psi: np.ndarray
    H: np.ndarray
    g: float  # joint negative log-density at the mode
    grad_norm: float
    iterations: int
    shift: float = 0.0  # largest Levenberg shift applied to a step
    logdet: float = 0.0


@dataclass
class FitResult:
    theta: np.ndarray
    psi: np.ndarray
    H: np.ndarray
    nll: float
    grad: np.ndarray
    converged: bool
    iterations: int
    wall_time: float
    n_evals: int
    n_inner_iterations: int
    layout: Layout
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0

    @property
    def params(self) -> ParamVector:
        return ParamVector.from_array(self.layout, self.theta)

    @property
    def random(self) -> RandomVector:
        return RandomVector.from_array(self.layout, self.psi)


# ---------------------------------------------------------------------------
# Problem: model + data bound together
# ---------------------------------------------------------------------------


@dataclass
class _Parts:
    theta_F: object
    beta: dict
    log_sigma: object
    log_g: list
    log_sigma_omega: object


class Problem:
    """A fit specification bound to a dataset.

    ``basis_scale`` multiplies every basis function by a constant; fitted
    curves and the maximized likelihood do not depend on it.
    """

    def __init__(self, spec: FitSpec, data: Dataset, basis_scale: float = 1.0):
        missing = [c for c in spec.covariate_names if c not in data.covariates]
        if missing:
            raise UnboundName(f"covariate(s) not in data: {', '.join(missing)}")
        if data.N == 0:
            raise ValueError("empty dataset")
        self.spec = spec
        self.data = data
        self.basis = spec.basis
        self.spline = PenalizedSpline(spec.basis, spec.penalty_order, spec.sum_to_zero)
        self.basis_scale = float(basis_scale)
        self.T_F = self.spline.T_F * self.basis_scale
        self.T_R = self.spline.T_R * self.basis_scale
        self.layout = Layout(n_fixed_spline=self.spline.null_dim, p=spec.p, q=spec.q,
                             r=self.spline.r, m=data.m, beta_labels=tuple(spec.beta_labels),
                             b_labels=tuple(spec.b_labels))
        self.b_slot = {label: k for k, label in enumerate(spec.b_labels)}
        self.child = spline_node(spec.model).child
        self.y = data.y
        self.cov = data.covariates
        q, m = self.layout.q, data.m
        self.b_index = data.subject[:, None] * q + np.arange(q)[None, :]
        self.starts = np.concatenate([[0], np.nonzero(np.diff(data.subject))[0] + 1])
        mono = spec.monotonicity
        if mono is not None and mono.lambda_c > 0:
            self.mono_B1 = basis_matrix(self.basis, monotonicity_grid(self.basis, mono.M), deriv=1)
        else:
            self.mono_B1 = None
        self._scaled = isinstance(spec.knots, Scaled)
        self.extrapolate = bool(getattr(spec, "extrapolate", False))

    # -- parameter access ---------------------------------------------------
    def _parts(self, theta) -> _Parts:
        L = self.layout
        so = L.log_sigma_omega
        return _Parts(
            theta_F=ad.getitem(theta, L.theta_F),
            beta={label: ad.getitem(theta, L.beta.start + i) for i, label in enumerate(L.beta_labels)},
            log_sigma=ad.getitem(theta, L.log_sigma),
            log_g=[ad.getitem(theta, L.log_g.start + k) for k in range(L.q)],
            log_sigma_omega=None if so is None else ad.getitem(theta, so))

    def coefficients(self, theta_F, omega):
        """Full spline coefficients from the fixed and penalized parts (batched ok)."""
        out = None
        if self.layout.n_fixed_spline:
            out = ad.matmul(theta_F, self.T_F.T)
        if self.layout.r:
            w = ad.matmul(omega, self.T_R.T)
            out = w if out is None else ad.add(out, w)
        return np.zeros(self.basis.n_basis) if out is None else out

    def coef_from(self, theta, psi) -> np.ndarray:
        L = self.layout
        return self.coefficients(np.asarray(theta)[L.theta_F], np.asarray(psi)[L.n_b:])

    # -- curve evaluation ---------------------------------------------------
    def _spline_value(self, u, coef):
        if self.spec.spline_mode == "fused":
            return spline_eval(self.basis, u, coef, extrapolate=self.extrapolate)
        B = basis_matrix(self.basis, u)
        return ad.reduce_sum(ad.mul(B, coef), axis=-1)

    def gamma_bounds(self, parts: _Parts, cov=None):
        """Range of the transformation at zero random effects, as taped values."""
        cov = self.cov if cov is None else cov
        zero_b = {label: 0.0 for label in self.b_slot}
        beta_num = {k: float(ad.primal(ad._val(v))) for k, v in parts.beta.items()}
        g0 = np.broadcast_to(ad.primal(eval_expr(self.child, Bindings(beta_num, zero_b, cov))),
                             (len(self.y),))
        jmin, jmax = int(np.argmin(g0)), int(np.argmax(g0))
        lo = eval_expr(self.child, Bindings(parts.beta, zero_b, {k: v[jmin] for k, v in cov.items()}))
        hi = eval_expr(self.child, Bindings(parts.beta, zero_b, {k: v[jmax] for k, v in cov.items()}))
        return lo, hi

    def _spline_fn(self, parts: _Parts, coef, bounds=None):
        if not self._scaled:
            return lambda u: self._spline_value(u, coef)
        knots = self.spec.knots
        lo, hi = bounds if bounds is not None else self.gamma_bounds(parts)
        k = self.b_slot[knots.shift]
        sig = ad.exp(ad.add(parts.log_sigma, parts.log_g[k]))

        def fn(u):
            return self._spline_value(gamma_star(u, lo, hi, sig, knots.c).value, coef)

        return fn

    def eta(self, parts: _Parts, bvals: dict, coef, cov=None, bounds=None):
        cov = self.cov if cov is None else cov
        if bounds is None and self._scaled:
            bounds = self.gamma_bounds(parts)
        env = Bindings(beta=parts.beta, b=bvals, covariates=cov,
                       spline=self._spline_fn(parts, coef, bounds))
        return eval_expr(self.spec.model, env)

    # -- negative log-density pieces ----------------------------------------
    def _data_terms(self, parts: _Parts, bvals: dict, coef):
        eta = self.eta(parts, bvals, coef)
        if not np.all(np.isfinite(ad.primal(ad._val(eta)))):
            raise ad.DomainError("non-finite linear predictor")
        res = ad.sub(self.y, eta)
        ls = parts.log_sigma
        scale = ad.mul(0.5, ad.exp(ad.mul(-2.0, ls)))
        return ad.add(ad.add(0.5 * LOG2PI, ls), ad.mul(scale, ad.mul(res, res)))

    def _prior_terms(self, parts: _Parts, psi):
        L = self.layout
        total = 0.0
        for k in range(L.q):
            bk = ad.getitem(psi, slice(k, L.n_b, L.q))
            lsk = ad.add(parts.log_sigma, parts.log_g[k])
            quad = ad.reduce_sum(ad.mul(bk, bk))
            total = ad.add(total, ad.add(ad.mul(float(L.m), ad.add(0.5 * LOG2PI, lsk)),
                                         ad.mul(ad.mul(0.5, ad.exp(ad.mul(-2.0, lsk))), quad)))
        if L.r:
            omega = ad.getitem(psi, slice(L.n_b, None))
            s = parts.log_sigma_omega
            quad = ad.reduce_sum(ad.mul(omega, omega))
            total = ad.add(total, ad.add(ad.mul(float(L.r), ad.add(0.5 * LOG2PI, s)),
                                         ad.mul(ad.mul(0.5, ad.exp(ad.mul(-2.0, s))), quad)))
        if self.mono_B1 is not None:
            coef = self.coefficients(parts.theta_F, ad.getitem(psi, slice(L.n_b, None)))
            total = ad.add(total, self.monotonicity_penalty(coef))
        return total

    def monotonicity_penalty(self, coef):
        """``lambda_c * sum_x s(f'(x))^2`` over the configured grid."""
        mono = self.spec.monotonicity
        if mono is None or mono.lambda_c == 0:
            return 0.0
        B1 = self.mono_B1
        if B1 is None:
            B1 = basis_matrix(self.basis, monotonicity_grid(self.basis, mono.M), deriv=1)
        slope = ad.matmul(coef, B1.T)
        s = ad.smooth_negpart(slope, mono.eps)
        return ad.mul(mono.lambda_c, ad.reduce_sum(ad.mul(s, s)))

    def joint_nld(self, theta, psi):
        """Joint negative log-density of ``(y, psi)`` given ``theta``.

        Generic over plain arrays and taped values of ``theta`` and ``psi``.
        """
        L = self.layout
        parts = self._parts(theta)
        bvals = {label: ad.getitem(psi, self.b_index[:, k]) for label, k in self.b_slot.items()}
        coef = self.coefficients(parts.theta_F, ad.getitem(psi, slice(L.n_b, None)))
        data = ad.reduce_sum(self._data_terms(parts, bvals, coef))
        return ad.add(data, self._prior_terms(parts, psi))

    def value(self, theta, psi) -> float:
        """Numeric joint negative log-density; ``inf`` where it cannot be evaluated."""
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                v = float(self.joint_nld(np.asarray(theta, float), np.asarray(psi, float)))
        except INFEASIBLE:
            return math.inf
        return v if math.isfinite(v) else math.inf

    def psi_derivatives(self, theta, psi):
        """Value, gradient and Hessian of the joint density in ``psi``.

        The data term is separable over observations given the subject's
        ``b_i`` and the shared ``omega``, so derivatives are taken row-wise
        over those ``q + r`` local variables and then assembled.
        """
        L = self.layout
        theta = np.asarray(theta, dtype=float)
        psi = np.asarray(psi, dtype=float)
        parts = self._parts(theta)
        m, q, r, n = L.m, L.q, L.r, L.n_psi
        bounds = self.gamma_bounds(parts) if self._scaled else None
        coef_const = self.coefficients(parts.theta_F, psi[L.n_b:]) if r == 0 else None
        cols = [psi[:L.n_b].reshape(m, q)[self.data.subject]] if q else []
        if r:
            cols.append(np.broadcast_to(psi[L.n_b:], (len(self.y), r)))
        Z = np.hstack(cols) if cols else np.zeros((len(self.y), 0))

        def local(z):
            bvals = {label: ad.getitem(z, (slice(None), k)) for label, k in self.b_slot.items()}
            coef = self.coefficients(parts.theta_F, ad.getitem(z, (slice(None), slice(q, None)))) \
                if r else coef_const
            eta = self.eta(parts, bvals, coef, bounds=bounds)
            if not np.all(np.isfinite(ad.primal(ad._val(eta)))):
                raise ad.DomainError("non-finite linear predictor")
            res = ad.sub(self.y, eta)
            return ad.add(0.5 * LOG2PI + parts.log_sigma,
                          ad.mul(0.5 * math.exp(-2.0 * parts.log_sigma), ad.mul(res, res)))

        if Z.shape[1]:
            vals, G, Hl = ad.batched_derivatives(local, Z)
        else:
            vals = np.broadcast_to(local(Z), (len(self.y),))
            G, Hl = np.zeros((len(self.y), 0)), np.zeros((len(self.y), 0, 0))
        grad = np.zeros(n)
        H = np.zeros((n, n))
        if q:
            idx = np.arange(L.n_b).reshape(m, q)
            grad[:L.n_b] = np.add.reduceat(G[:, :q], self.starts, axis=0).ravel()
            H[idx[:, :, None], idx[:, None, :]] = np.add.reduceat(Hl[:, :q, :q], self.starts, axis=0)
            if r:
                Hbw = np.add.reduceat(Hl[:, :q, q:], self.starts, axis=0).reshape(L.n_b, r)
                H[:L.n_b, L.n_b:] = Hbw
                H[L.n_b:, :L.n_b] = Hbw.T
        if r:
            grad[L.n_b:] = G[:, q:].sum(axis=0)
            H[L.n_b:, L.n_b:] = Hl[:, q:, q:].sum(axis=0)
        value = float(np.sum(vals))
        if n:
            pv, pg, pH = ad.value_grad_hessian(lambda x: self._prior_terms(parts, x), psi)
        else:
            pv, pg, pH = float(ad.primal(self._prior_terms(parts, psi))), np.zeros(0), np.zeros((0, 0))
        return value + pv, grad + pg, H + pH

    def theta0_psi0(self):
        return starting_values(self)


# ---------------------------------------------------------------------------
# Inner problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerOptions:
    tol: float = 1e-8
    max_iter: int = 100
    armijo: float = 1e-4
    contraction: float = 0.5
    mu0: float = 1e-6
    max_halvings: int = 50
    polish: bool = True


def _shifted_cholesky(H: np.ndarray, mu0: float):
    try:
        return cholesky(H), 0.0
    except NotPositiveDefinite:
        pass
    mu = mu0
    n = H.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(H))))) if n else 1.0
    while mu < 1e12 * scale:
        try:
            return cholesky(H + mu * np.eye(n)), mu
        except NotPositiveDefinite:
            mu *= 2.0
    raise IndefiniteModeHessian("Levenberg shift failed to produce a positive definite matrix")


def inner_solve(problem: Problem, theta, psi0, options: InnerOptions = InnerOptions()) -> LaplaceState:
    """Newton iterations for the mode of ``psi -> joint_nld(theta, psi)``."""
    theta = np.asarray(theta, dtype=float)
    psi = np.array(psi0, dtype=float)
    n = psi.shape[0]
    if not np.all(np.isfinite(psi)):
        raise InfeasibleStart("non-finite starting random effects")
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            f, g, H = problem.psi_derivatives(theta, psi)
    except INFEASIBLE as exc:
        raise InfeasibleStart(str(exc)) from None
    if not math.isfinite(f):
        raise InfeasibleStart("joint density not finite at the starting point")
    if n == 0:
        return LaplaceState(psi=psi, H=H, g=f, grad_norm=0.0, iterations=0)

    from scipy.linalg import cho_solve

    max_shift = 0.0
    polished = not options.polish
    steps = 0
    for _ in range(options.max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        converged = gnorm <= options.tol * (1.0 + abs(f))
        if converged and polished:
            break
        L, mu = _shifted_cholesky(H, options.mu0)
        max_shift = max(max_shift, mu)
        step = -cho_solve((L, True), g)
        slope = float(g @ step)
        alpha = 1.0
        accepted = False
        if converged:
            # one extra full Newton step sharpens the mode to rounding level
            polished = True
            trial = psi + step
            f_new = problem.value(theta, trial)
            accepted = f_new <= f + 1e-12 * (1.0 + abs(f))
        else:
            for _ in range(options.max_halvings):
                trial = psi + alpha * step
                f_new = problem.value(theta, trial)
                if f_new <= f + options.armijo * alpha * slope:
                    accepted = True
                    break
                alpha *= options.contraction
        if not accepted:
            if converged or gnorm <= 1e3 * options.tol * (1.0 + abs(f)):
                break  # at the attainable precision
            raise InnerDivergence(f"line search failed with gradient norm {gnorm:.3g}")
        psi = trial
        steps += 1
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            f, g, H = problem.psi_derivatives(theta, psi)
    else:
        gnorm = float(np.max(np.abs(g)))
        if gnorm > options.tol * (1.0 + abs(f)):
            raise InnerDivergence(f"no convergence in {options.max_iter} iterations "
                                  f"(gradient norm {gnorm:.3g})")
    try:
        Lh = cholesky(H)
    except NotPositiveDefinite:
        raise IndefiniteModeHessian("Hessian at the mode is not positive definite") from None
    logdet = float(2.0 * np.sum(np.log(np.diag(Lh))))
    return LaplaceState(psi=psi, H=H, g=f, grad_norm=float(np.max(np.abs(g))), iterations=steps,
                        shift=max_shift, logdet=logdet)


def laplace_nll(problem: Problem, theta, psi0=None, options: InnerOptions = InnerOptions()):
    """Negative Laplace-approximate marginal log-likelihood and the inner state."""
    if psi0 is None:
        psi0 = np.zeros(problem.layout.n_psi)
    state = inner_solve(problem, theta, psi0, options)
    n = problem.layout.n_psi
    return state.g + 0.5 * state.logdet - 0.5 * n * LOG2PI, state


def ift_gradient(problem: Problem, theta, psi0=None, h: float = 1e-5) -> np.ndarray:
    """Gradient of :func:`laplace_nll` through the implicit function theorem.

    At the mode the joint density is stationary in ``psi``, so the total
    derivative is its partial in ``theta`` plus half the trace of
    ``H^-1 dH/dtheta``; ``dH`` follows the mode as it moves with ``theta``
    (``dpsi/dtheta = -H^-1 d2g/dpsi dtheta``) and is obtained by central
    differences of exact Hessians along that path.
    """
    theta = np.asarray(theta, dtype=float)
    _, state = laplace_nll(problem, theta, psi0)
    psi = state.psi
    partial = ad.grad(lambda t: problem.joint_nld(t, psi), theta)
    if problem.layout.n_psi == 0:
        return partial
    cross = ad.cross_jacobian(lambda p, t: problem.joint_nld(t, p), psi, theta)
    Hinv = np.linalg.inv(state.H)
    dpsi = -Hinv @ cross
    out = partial.copy()
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        _, _, Hp = problem.psi_derivatives(theta + e, psi + h * dpsi[:, k])
        _, _, Hm = problem.psi_derivatives(theta - e, psi - h * dpsi[:, k])
        dH = (Hp - Hm) / (2.0 * h)
        out[k] += 0.5 * float(np.sum(Hinv * dH.T))
    return out


# ---------------------------------------------------------------------------
# Outer problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OuterOptions:
    gtol: float = 1e-5
    ftol: float = 1e-9
    max_iter: int = 500
    fd_rel_step: float = 1e-5
    max_step: float = 2.0  # largest change of any parameter in one line-search trial
    armijo: float = 1e-4
    retries: int = 3
    inner: InnerOptions = InnerOptions()


class Objective:
    """``theta -> laplace_nll`` with a cached mode used to warm-start every solve."""

    def __init__(self, problem: Problem, psi0, options: OuterOptions = OuterOptions()):
        self.problem = problem
        self.options = options
        self.center = np.array(psi0, dtype=float)
        self.n_evals = 0
        self.n_inner = 0
        self.last_state: Optional[LaplaceState] = None

    def evaluate(self, theta, psi0=None):
        """``(value, state)``; value is ``inf`` when the point is infeasible."""
        start = self.center if psi0 is None else psi0
        rng = None
        for attempt in range(self.options.retries + 1):
            self.n_evals += 1
            try:
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    val, state = laplace_nll(self.problem, theta, start, self.options.inner)
                self.n_inner += state.iterations
                if math.isfinite(val):
                    return val, state
                return math.inf, None
            except InfeasibleStart:
                if attempt == 0 and psi0 is None and np.any(self.center != 0):
                    start = np.zeros_like(self.center)
                    continue
                return math.inf, None
            except InnerFailure:
                if rng is None:
                    rng = stream(self.n_evals, "jitter")
                start = self.center + 0.1 * rng.standard_normal(self.center.shape)
            except INFEASIBLE:
                return math.inf, None
        return math.inf, None

    def accept(self, state: LaplaceState):
        self.center = state.psi.copy()
        self.last_state = state

    def gradient(self, theta, rel_step: Optional[float] = None):
        h_rel = self.options.fd_rel_step if rel_step is None else rel_step
        theta = np.asarray(theta, dtype=float)
        g = np.zeros_like(theta)
        for i in range(theta.size):
            h = h_rel * max(1.0, abs(theta[i]))
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fp, _ = self.evaluate(tp)
            fm, _ = self.evaluate(tm)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                f0, _ = self.evaluate(theta)
                if math.isfinite(fp):
                    g[i] = (fp - f0) / h
                elif math.isfinite(fm):
                    g[i] = (f0 - fm) / h
                else:
                    g[i] = math.nan
            else:
                g[i] = (fp - fm) / (2.0 * h)
        return g


def outer_optimize(problem: Problem, theta0=None, psi0=None,
                   options: OuterOptions = OuterOptions()) -> FitResult:
    """Maximize the Laplace marginal likelihood over ``theta`` by BFGS."""
    t_start = time.perf_counter()
    if theta0 is None:
        theta0, sv_psi = starting_values(problem)
        psi0 = sv_psi if psi0 is None else psi0
    theta = np.array(theta0, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("starting values must be finite")
    if psi0 is None:
        psi0 = np.zeros(problem.layout.n_psi)
    obj = Objective(problem, psi0, options)
    f, state = obj.evaluate(theta)
    if state is None:
        raise InnerFailure("marginal likelihood cannot be evaluated at the starting values")
    obj.accept(state)
    trace = [f]
    n = theta.size
    Hinv = np.eye(n)
    scaled = False
    g = obj.gradient(theta)
    converged = False
    rel_dec = 0.0
    message = "iteration limit reached"
    it = 0
    for it in range(options.max_iter + 1):
        if not np.all(np.isfinite(g)):
            message = "gradient not finite"
            break
        gnorm = float(np.max(np.abs(g))) if n else 0.0
        if gnorm <= options.gtol and rel_dec <= options.ftol:
            converged = True
            message = "converged"
            break
        if it == options.max_iter:
            break
        d = -Hinv @ g
        if float(g @ d) >= 0:  # lost descent: restart from steepest descent
            Hinv = np.eye(n)
            scaled = False
            d = -g
        big = float(np.max(np.abs(d)))
        alpha = min(1.0, options.max_step / big) if big > 0 else 1.0
        slope = float(g @ d)
        accepted = False
        for _ in range(40):
            trial = theta + alpha * d
            f_new, st = obj.evaluate(trial)
            if st is not None and f_new <= f + options.armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if scaled or not np.allclose(Hinv, np.eye(n)):
                Hinv = np.eye(n)
                scaled = False
                rel_dec = 0.0
                continue
            message = "line search failed"
            converged = gnorm <= options.gtol
            break
        obj.accept(st)
        s = trial - theta
        g_new = obj.gradient(trial)
        yv = g_new - g
        rel_dec = (f - f_new) / max(1.0, abs(f))
        theta, f, g = trial, f_new, g_new
        trace.append(f)
        sy = float(s @ yv)
        if np.all(np.isfinite(yv)) and sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if not scaled:
                Hinv = np.eye(n) * (sy / float(yv @ yv))
                scaled = True
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
    st = obj.last_state
    return FitResult(theta=theta, psi=st.psi.copy(), H=st.H.copy(), nll=float(f), grad=g,
                     converged=converged, iterations=it, wall_time=time.perf_counter() - t_start,
                     n_evals=obj.n_evals, n_inner_iterations=obj.n_inner, layout=problem.layout,
                     trace=trace, message=message)


def fit(spec: FitSpec, data: Dataset, options: OuterOptions = OuterOptions(), **kw) -> tuple[FitResult, Problem]:
    problem = Problem(spec, data, **kw)
    return outer_optimize(problem, options=options), problem


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def _forward_eta(problem: Problem, beta_vec, coef, cov=None, sigma_shift=None):
    """Linear predictor at ``b = 0`` with ``beta`` carried as forward-mode duals."""
    L = problem.layout
    beta = {label: beta_vec[i] for i, label in enumerate(L.beta_labels)}
    zero_b = {label: 0.0 for label in problem.b_slot}
    parts = _Parts(theta_F=None, beta=beta, log_sigma=0.0, log_g=[0.0] * L.q, log_sigma_omega=None)
    if problem._scaled:
        lo, hi = problem.gamma_bounds(parts)
        knots = problem.spec.knots

        def fn(u):
            return spline_eval(problem.basis, gamma_star(u, lo, hi, sigma_shift, knots.c).value,
                               coef, extrapolate=problem.extrapolate)
    else:
        def fn(u):
            return spline_eval(problem.basis, u, coef, extrapolate=problem.extrapolate)
    return eval_expr(problem.spec.model, Bindings(beta, zero_b, problem.cov, fn))


def _gcv_fit(X: np.ndarray, y: np.ndarray, P: np.ndarray, n_grid: int = 20):
    """Penalized least squares with the smoothing parameter chosen by GCV."""
    XtX = X.T @ X
    Xty = X.T @ y
    trP = np.trace(P)
    base = np.trace(XtX) / trP if trP > 0 else 1.0
    grid = base * np.logspace(-10, 3, n_grid) if trP > 0 else np.array([0.0])
    best = None
    N = len(y)
    for lam in grid:
        A = XtX + lam * P + 1e-12 * np.trace(XtX) / max(1, XtX.shape[0]) * np.eye(XtX.shape[0])
        try:
            Ainv = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            continue
        c = Ainv @ Xty
        res = y - X @ c
        edf = float(np.sum(Ainv * XtX))
        denom = (N - edf) ** 2
        gcv = N * float(res @ res) / denom if denom > 0 else math.inf
        if best is None or gcv < best[0]:
            best = (gcv, lam, c)
    if best is None:
        raise SingularDesign("penalized least squares system is singular")
    return best[2], best[1]


def starting_values(problem: Problem):
    """Two-step starting values ``(theta0, psi0)``.

    1. Fit the curve by penalized least squares against the spline argument
       at zero random effects and zero fixed effects (GCV smoothing).
    2. Hold the curve and fit ``beta`` by damped Gauss-Newton with ``b = 0``;
       then take ``sigma`` from within-subject residual spread and the
       random-effect scales from between-subject spread.
    """
    L = problem.layout
    data = problem.data
    y = problem.y
    N, K = len(y), problem.basis.n_basis
    beta0 = np.zeros(L.p)
    sigma_shift = None
    if problem._scaled:
        zero = _Parts(None, {lab: 0.0 for lab in L.beta_labels}, 0.0, [0.0] * L.q, None)
        lo, hi = problem.gamma_bounds(zero)
        sigma_shift = 0.05 * max(float(hi - lo), 1e-6)
    # eta is affine in f at fixed beta and b: eta = a + scale * f(u)
    a = np.broadcast_to(ad.primal(_forward_eta(problem, beta0, np.zeros(K), sigma_shift=sigma_shift)), (N,))
    # eta(e_k) - a is the k-th basis function times the curve's multiplier
    basis_rows = np.zeros((N, K))
    for k in range(K):
        e = np.zeros(K)
        e[k] = 1.0
        basis_rows[:, k] = np.broadcast_to(
            ad.primal(_forward_eta(problem, beta0, e, sigma_shift=sigma_shift)), (N,)) - a
    T = np.hstack([problem.T_F, problem.T_R])  # coefficients = T @ (theta_F, omega)
    X = basis_rows @ T
    P = np.zeros((T.shape[1], T.shape[1]))
    P[L.n_fixed_spline:, L.n_fixed_spline:] = np.eye(L.r)
    ytarget = y - a
    if problem.spec.sum_to_zero:
        X = np.hstack([np.ones((N, 1)), X])
        P = np.pad(P, ((1, 0), (1, 0)))
    sol, lam = _gcv_fit(X, ytarget, P)
    if problem.spec.sum_to_zero:
        sol = sol[1:]
    theta_F, omega = sol[:L.n_fixed_spline], sol[L.n_fixed_spline:]
    coef = problem.coefficients(theta_F, omega)

    beta = beta0.copy()
    if L.p:
        beta = _gauss_newton_beta(problem, beta, coef, sigma_shift)
    eta = np.broadcast_to(ad.primal(_forward_eta(problem, beta, coef, sigma_shift=sigma_shift)), (N,))
    res = y - eta
    means = np.bincount(data.subject, weights=res, minlength=L.m) / data.n_i
    within = res - means[data.subject]
    dof = max(N - L.m, 1) if L.q else max(N - 1, 1)
    sigma0 = max(math.sqrt(float(within @ within) / dof) if L.q else float(np.std(res)), 1e-4)
    spread = float(np.std(means)) if L.q else 0.0
    g0 = np.full(L.q, float(np.clip(spread / sigma0, 0.05, 10.0)))
    if problem._scaled:
        k = problem.b_slot[problem.spec.knots.shift]
        g0[k] = sigma_shift / sigma0
    theta = [theta_F, beta, [math.log(sigma0)], np.log(g0)]
    if L.r:
        so = sigma0 / math.sqrt(lam) if lam > 0 else sigma0
        theta.append([float(np.clip(math.log(so), math.log(sigma0) - 12, math.log(sigma0) + 12))])
    theta = np.concatenate([np.asarray(t, float).ravel() for t in theta])
    psi = np.concatenate([np.zeros(L.n_b), omega])
    return theta, psi


def _gauss_newton_beta(problem: Problem, beta, coef, sigma_shift, max_iter: int = 50):
    """Levenberg-Marquardt on ``beta`` with the curve and ``b = 0`` held fixed."""
    y = problem.y
    p = beta.size

    def resid(bv):
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                e = _forward_eta(problem, ad.Dual(bv, np.eye(p)), coef, sigma_shift=sigma_shift)
        except INFEASIBLE:
            return None, None
        v = np.broadcast_to(e.v if isinstance(e, ad.Dual) else e, y.shape)
        J = np.broadcast_to(e.t, y.shape + (p,)) if isinstance(e, ad.Dual) else np.zeros(y.shape + (p,))
        return y - v, J

    r, J = resid(beta)
    if r is None:
        return beta
    cost = float(r @ r)
    mu = 1e-3
    for _ in range(max_iter):
        A = J.T @ J
        gvec = J.T @ r
        step_ok = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + mu * np.diag(np.diag(A) + 1e-12), gvec)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            r_new, J_new = resid(beta + step)
            if r_new is not None and float(r_new @ r_new) < cost:
                step_ok = True
                break
            mu *= 10
        if not step_ok:
            break
        beta = beta + step
        new_cost = float(r_new @ r_new)
        r, J = r_new, J_new
        mu = max(mu / 10, 1e-12)
        if cost - new_cost <= 1e-12 * max(cost, 1e-300):
            cost = new_cost
            break
        cost = new_cost
    return beta
