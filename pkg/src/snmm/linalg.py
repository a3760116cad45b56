"""Dense linear algebra used throughout the package.

Matrices are plain float64 ``numpy`` arrays. Factorizations go through
LAPACK (via scipy); the symmetric eigendecomposition is a cyclic Jacobi
solver, which is accurate on the small penalty matrices built here.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot falls at or below the tolerance."""


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SymEigen:
    vectors: np.ndarray  # orthonormal columns
    values: np.ndarray  # nonincreasing

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def _check_symmetric(a: np.ndarray, tol: float = 1e-10) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(a, tol: float = 0.0) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Raises :class:`NotPositiveDefinite` when a pivot is ``<= tol``.
    """
    a = as_matrix(a)
    _check_symmetric(a)
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        L = sla.cholesky(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    d = np.diag(L)
    if not np.all(np.isfinite(L)) or np.min(d) <= tol:
        raise NotPositiveDefinite(f"pivot {np.min(d):.3g} <= {tol:.3g}")
    return L


def logdet_spd(a) -> float:
    L = cholesky(a)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    L = cholesky(a)
    b = np.asarray(b, dtype=float)
    if L.shape[0] == 0:
        return np.zeros_like(b)
    return sla.cho_solve((L, True), b, check_finite=False)


def inv_spd(a) -> np.ndarray:
    a = as_matrix(a)
    return solve_spd(a, np.eye(a.shape[0]))


def sym_eigen(s, tol: float = 1e-15, max_sweeps: int = 100) -> SymEigen:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in nonincreasing order. Sweeps stop when the
    off-diagonal Frobenius mass drops below ``tol`` times the matrix norm.
    """
    a = as_matrix(s).copy()
    _check_symmetric(a)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n <= 1 or norm == 0.0:
        return _sorted(v, np.diag(a).copy())

    for _ in range(max_sweeps):
        off = _offdiag_norm(a)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-20 * norm:
                    a[p, q] = a[q, p] = 0.0
                    continue
                # rotation angle zeroing a[p, q] (Golub & Van Loan, sym.schur2)
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s_ = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s_ * aq
                a[:, q] = s_ * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s_ * rq
                a[q, :] = s_ * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s_ * vq
                v[:, q] = s_ * vp + c * vq
    else:
        off = _offdiag_norm(a)
        if off > 1e3 * tol * norm:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
    return _sorted(v, np.diag(a).copy())


def _offdiag_norm(a: np.ndarray) -> float:
    # summed directly: subtracting the diagonal from the full norm cancels badly
    return float(np.sqrt(np.sum(a * a, where=~np.eye(a.shape[0], dtype=bool))))


def _sorted(v: np.ndarray, w: np.ndarray) -> SymEigen:
    order = np.argsort(-w, kind="stable")
    return SymEigen(vectors=v[:, order], values=w[order])
