import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snmm.linalg import (NoConvergence, NotPositiveDefinite, cholesky, inv_spd, logdet_spd,
                         solve_spd, sym_eigen)
from snmm.splines import difference_penalty

from conftest import random_spd


def permutation_det(a):
    """Leibniz expansion: an independent determinant for small matrices."""
    n = a.shape[0]
    total = 0.0
    for perm in itertools.permutations(range(n)):
        inversions = sum(1 for i in range(n) for j in range(i + 1, n) if perm[i] > perm[j])
        total += (-1) ** inversions * np.prod([a[i, perm[i]] for i in range(n)])
    return total


def test_cholesky_identity():
    assert np.array_equal(cholesky(np.eye(3)), np.eye(3))


def test_cholesky_reconstructs_small_matrix():
    a = np.array([[4.0, 2.0], [2.0, 3.0]])
    L = cholesky(a)
    assert np.allclose(np.triu(L, 1), 0.0)
    assert np.max(np.abs(L @ L.T - a)) <= 1e-12


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_logdet_examples():
    assert logdet_spd(np.eye(5)) == 0.0
    assert logdet_spd(np.diag([2.0, 8.0])) == pytest.approx(np.log(16.0), abs=1e-14)


def test_logdet_matches_expansion(rng):
    a = random_spd(rng, 6, cond=50.0)
    assert logdet_spd(a) == pytest.approx(np.log(permutation_det(a)), abs=1e-9)


def test_solve_examples(rng):
    b = rng.standard_normal(4)
    assert np.allclose(solve_spd(np.eye(4), b), b)
    assert np.allclose(solve_spd(np.diag([2.0, 4.0]), [2.0, 8.0]), [1.0, 2.0])
    a = random_spd(rng, 8, cond=100.0)
    b = rng.standard_normal(8)
    x = solve_spd(a, b)
    assert np.max(np.abs(a @ x - b)) <= 1e-9 * (1.0 + np.max(np.abs(b)))


def test_eigen_diagonal_input():
    e = sym_eigen(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(e.values, [3.0, 2.0, 1.0])
    assert np.allclose(np.abs(e.vectors), np.eye(3)[:, [0, 2, 1]])


def test_eigen_swap_matrix():
    e = sym_eigen([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(e.values, [1.0, -1.0], atol=1e-14)


def test_eigen_second_difference_null_space():
    S = difference_penalty(5, 2)
    e = sym_eigen(S)
    small = np.abs(e.values) < 1e-10 * e.values[0]
    assert small.sum() == 2
    null = e.vectors[:, small]
    # the null space is spanned by the constant and linear sequences
    for v in (np.ones(5), np.arange(5.0)):
        resid = v - null @ (null.T @ v)
        assert np.linalg.norm(resid) < 1e-10 * np.linalg.norm(v)
    assert np.max(np.abs(S @ null)) < 1e-12


def test_eigen_sweep_cap():
    a = random_spd(np.random.default_rng(3), 12, cond=1e3)
    with pytest.raises(NoConvergence):
        sym_eigen(a, max_sweeps=1)


def spd_matrices(max_n=8):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(np.float64, (n, n), elements=st.floats(-3, 3))
    ).map(lambda b: b @ b.T + b.shape[0] * np.eye(b.shape[0]))


def sym_matrices(max_n=10):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(np.float64, (n, n), elements=st.floats(-5, 5))
    ).map(lambda b: 0.5 * (b + b.T))


@given(spd_matrices())
def test_cholesky_reconstruction_property(a):
    L = cholesky(a)
    assert np.linalg.norm(L @ L.T - a) <= 1e-10 * np.linalg.norm(a)


@given(sym_matrices())
def test_eigen_reconstruction_property(s):
    e = sym_eigen(s)
    n = s.shape[0]
    scale = max(np.linalg.norm(s), 1e-300)
    assert np.linalg.norm(e.reconstruct() - s) <= 1e-9 * scale + 1e-300
    assert np.max(np.abs(e.vectors.T @ e.vectors - np.eye(n))) <= 1e-10
    assert np.all(np.diff(e.values) <= 0)


@given(sym_matrices())
def test_eigenvalues_match_lapack(s):
    expected = np.sort(np.linalg.eigvalsh(s))[::-1]
    scale = max(np.linalg.norm(s), 1.0)
    assert np.allclose(sym_eigen(s).values, expected, rtol=0, atol=1e-10 * scale)


@given(spd_matrices(6))
def test_logdet_of_inverse_cancels(a):
    assert abs(logdet_spd(a) + logdet_spd(inv_spd(a))) <= 1e-8
