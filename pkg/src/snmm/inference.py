"""Uncertainty for fitted models: parameter covariance, prediction covariance and bands."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import ad
from .estimator import FitResult, Objective, OuterOptions, Problem
from .linalg import solve_spd
from .rng import stream


class SingularInformation(np.linalg.LinAlgError):
    pass


@dataclass
class FixedCov:
    matrix: np.ndarray
    information: np.ndarray
    condition: float
    floored: int = 0  # directions whose information was not positive
    labels: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))


@dataclass
class PredictionCov:
    matrix: np.ndarray  # over (psi, theta)
    J: np.ndarray  # d(psi_hat, theta)/d theta
    n_psi: int


@dataclass
class Band:
    grid: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    pw_lo: np.ndarray
    pw_hi: np.ndarray
    sim_lo: np.ndarray
    sim_hi: np.ndarray
    critical: float
    alpha: float
    zero_se: int = 0

    @property
    def width(self) -> float:
        """Average width of the simultaneous band."""
        return float(np.mean(self.sim_hi - self.sim_lo))

    def covers(self, truth) -> bool:
        truth = np.asarray(truth, dtype=float)
        return bool(np.all((self.sim_lo <= truth) & (truth <= self.sim_hi)))


def information_matrix(fit: FitResult, problem: Problem, rel_step: float = 1e-4,
                       options: OuterOptions = OuterOptions()) -> np.ndarray:
    """Hessian of the negative marginal log-likelihood by differences of the FD gradient."""
    theta = np.asarray(fit.theta, dtype=float)
    n = theta.size
    info = np.zeros((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(theta[i]))
        rows = []
        for sgn in (1.0, -1.0):
            t = theta.copy()
            t[i] += sgn * h
            obj = Objective(problem, fit.psi, options)
            val, st = obj.evaluate(t)
            if st is None:
                raise SingularInformation(f"likelihood not finite near the estimate (parameter {i})")
            obj.accept(st)
            rows.append(obj.gradient(t))
        info[i] = (rows[0] - rows[1]) / (2.0 * h)
    return 0.5 * (info + info.T)


def fixed_cov(fit: FitResult, problem: Problem, rel_step: float = 1e-4, singular: str = "raise",
              options: OuterOptions = OuterOptions()) -> FixedCov:
    """``Var(theta_hat)`` as the inverse observed information.

    With ``singular="pinv"`` directions of non-positive curvature get zero
    variance instead of raising :class:`SingularInformation`; their count is
    recorded in ``floored``.
    """
    info = information_matrix(fit, problem, rel_step, options)
    if not np.all(np.isfinite(info)):
        raise SingularInformation("information matrix has non-finite entries")
    w, U = np.linalg.eigh(info)
    wmax = float(np.max(np.abs(w))) if w.size else 1.0
    good = w > 1e-12 * max(wmax, 1e-300)
    cond = float(w.max() / w.min()) if w.size and w.min() > 0 else math.inf
    floored = int(np.sum(~good))
    if floored == 0:
        cov = solve_spd(info, np.eye(info.shape[0]))
    elif singular == "pinv":
        cov = (U[:, good] / w[good]) @ U[:, good].T
    else:
        raise SingularInformation(
            f"{floored} direction(s) with non-positive curvature; smallest eigenvalue {w.min():.3g}")
    cov = 0.5 * (cov + cov.T)
    # clean rounding-level negative eigenvalues
    cw, cU = np.linalg.eigh(cov)
    if np.any(cw < 0):
        cov = (cU * np.clip(cw, 0.0, None)) @ cU.T
    return FixedCov(matrix=cov, information=info, condition=cond, floored=floored,
                    labels=problem.layout.theta_labels)


def prediction_cov(fit: FitResult, problem: Problem, cov) -> PredictionCov:
    """Covariance of the errors ``(psi_hat - psi, theta_hat - theta)``.

    ``[[H^-1, 0], [0, 0]] + J Var(theta) J'`` with ``J = [dpsi_hat/dtheta; I]``.
    """
    V = cov.matrix if isinstance(cov, FixedCov) else np.asarray(cov, dtype=float)
    L = problem.layout
    npsi, nth = L.n_psi, L.n_theta
    if npsi:
        Hinv = solve_spd(fit.H, np.eye(npsi))
        cross = ad.cross_jacobian(lambda p, t: problem.joint_nld(t, p), fit.psi, fit.theta)
        dpsi = -Hinv @ cross
    else:
        Hinv = np.zeros((0, 0))
        dpsi = np.zeros((0, nth))
    J = np.vstack([dpsi, np.eye(nth)])
    M = J @ V @ J.T
    M[:npsi, :npsi] += Hinv
    return PredictionCov(matrix=0.5 * (M + M.T), J=J, n_psi=npsi)


@dataclass(frozen=True)
class Population:
    """Curve at zero random effects; ``covariates`` fixes the non-time columns."""

    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Subject:
    index: int


def curve_jacobian(problem: Problem, theta, psi, target, grid):
    """Curve values on ``grid`` and their Jacobian in ``(psi, theta)`` (forward mode)."""
    grid = np.asarray(grid, dtype=float)
    L = problem.layout
    G = grid.size
    npsi, nth = L.n_psi, L.n_theta
    k = npsi + nth
    eye = np.eye(k)
    psi_d = ad.Dual(psi, eye[:npsi])
    theta_d = ad.Dual(theta, eye[npsi:])
    data = problem.data
    if isinstance(target, Subject):
        i = target.index
        row = int(problem.starts[i])
        cov = {name: np.full(G, col[row]) for name, col in data.covariates.items()}
        bvals = {label: psi_d[i * L.q + slot] for label, slot in problem.b_slot.items()}
    else:
        cov = {name: np.full(G, float(target.covariates.get(name, 0.0)))
               for name in data.covariates}
        bvals = {label: 0.0 for label in problem.b_slot}
    cov[data.time] = grid
    parts = problem._parts(theta_d)
    coef = problem.coefficients(parts.theta_F, psi_d[L.n_b:])
    with np.errstate(all="ignore"):
        eta = problem.eta(parts, bvals, coef, cov=cov)
    if not isinstance(eta, ad.Dual):
        return np.broadcast_to(eta, (G,)).copy(), np.zeros((G, k))
    eta = eta + np.zeros(G)
    return eta.v.copy(), eta.t.copy()


def _factor(M: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(M)
    w = np.clip(w, 0.0, None)
    keep = w > 0
    return U[:, keep] * np.sqrt(w[keep])


def critical_value(rows: np.ndarray, se: np.ndarray, alpha: float = 0.05, n_sim: int = 10000,
                   seed: int = 0) -> float:
    """Simulated ``1 - alpha`` quantile of ``max_t |d_t| / se_t``.

    ``rows`` maps standard normal draws to curve deviations
    (``d = rows @ eps``); grid points with zero ``se`` are left out.
    """
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    ok = se > 0
    if not np.any(ok) or rows.shape[1] == 0:
        return z
    rng = stream(seed, "band")
    eps = rng.standard_normal((rows.shape[1], n_sim))
    dev = np.abs(rows[ok] @ eps) / se[ok, None]
    return max(z, float(np.quantile(dev.max(axis=0), 1.0 - alpha)))


def curve_band(fit: FitResult, problem: Problem, pcov: PredictionCov, target, grid,
               alpha: float = 0.05, n_sim: int = 10000, seed: int = 0) -> Band:
    """Pointwise and simultaneous bands for a population or subject curve.

    Simulated deviations are drawn in parameter space and mapped through the
    curve Jacobian, so draws for a sub-grid are the corresponding coordinates
    of the draws for the full grid.
    """
    if n_sim < 1:
        raise ValueError("n_sim must be positive")
    grid = np.asarray(grid, dtype=float)
    est, Jc = curve_jacobian(problem, fit.theta, fit.psi, target, grid)
    JA = Jc @ _factor(pcov.matrix)  # (G, rank)
    se = np.sqrt(np.sum(JA * JA, axis=1))
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    tiny = 1e-14 * max(1.0, float(np.max(np.abs(est)))) if est.size else 0.0
    se = np.where(se > tiny, se, 0.0)
    crit = critical_value(JA, se, alpha, n_sim, seed)
    return Band(grid=grid, estimate=est, se=se, pw_lo=est - z * se, pw_hi=est + z * se,
                sim_lo=est - crit * se, sim_hi=est + crit * se, critical=crit, alpha=alpha,
                zero_se=int(np.sum(se == 0)))


@dataclass
class WaldRow:
    name: str
    estimate: float
    se: float
    lo: float
    hi: float


def _exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def _exp_row(name: str, est: float, se: float, z: float) -> WaldRow:
    """Interval built on the log scale and mapped back; overflow saturates to inf."""
    return WaldRow(name, _exp(est), _exp(est) * se, _exp(est - z * se), _exp(est + z * se))


def wald_ci(fit: FitResult, cov, alpha: float = 0.05) -> list[WaldRow]:
    """Wald intervals for fixed effects and standard deviations.

    Standard deviations are handled on the log scale and back-transformed;
    ``sigma_b`` for an effect combines ``log sigma`` and its relative log
    scale. Reported ``se`` values are on the natural scale (delta method).
    """
    V = cov.matrix if isinstance(cov, FixedCov) else np.asarray(cov, dtype=float)
    L = fit.layout
    theta = fit.theta
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    rows = []
    for i, label in enumerate(L.beta_labels):
        j = L.beta.start + i
        se = math.sqrt(max(V[j, j], 0.0))
        rows.append(WaldRow(f"beta{label}", float(theta[j]), se, theta[j] - z * se, theta[j] + z * se))

    def log_row(name, w):
        est = float(w @ theta)
        se = math.sqrt(max(float(w @ V @ w), 0.0))
        return _exp_row(name, est, se, z)

    for slot in range(L.q):
        w = np.zeros(theta.size)
        w[L.log_sigma] = 1.0
        w[L.log_g.start + slot] = 1.0
        rows.append(log_row(f"sigma_b{slot + 1}", w))
    w = np.zeros(theta.size)
    w[L.log_sigma] = 1.0
    rows.append(log_row("sigma", w))
    return rows


def smoothing_ci(fit: FitResult, cov, alpha: float = 0.05) -> Optional[WaldRow]:
    L = fit.layout
    if L.log_sigma_omega is None:
        return None
    V = cov.matrix if isinstance(cov, FixedCov) else np.asarray(cov, dtype=float)
    j = L.log_sigma_omega
    z = float(stats.norm.ppf(1.0 - alpha / 2.0))
    return _exp_row("sigma_omega", float(fit.theta[j]), math.sqrt(max(V[j, j], 0.0)), z)


def marginal_aic(fit: FitResult) -> float:
    return 2.0 * fit.layout.n_theta + 2.0 * fit.nll
