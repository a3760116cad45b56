import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import BSpline

from snmm import ad
from snmm.splines import (BasisSpec, DegenerateRange, InvalidOrder, OutOfDomain, PenalizedSpline,
                          basis_matrix, decompose, difference_penalty, gamma_star,
                          monotonicity_grid, spline_eval, sum_to_zero_basis)

from conftest import central_diff

specs = st.builds(
    lambda lo, width, k, p: BasisSpec(n_interior=k, lower=lo, upper=lo + width, degree=p),
    st.floats(-50, 50), st.floats(0.1, 100), st.integers(1, 15), st.integers(1, 4))


def points_in(spec, rng, n=50):
    return rng.uniform(spec.lower, spec.upper, n)


def scipy_basis(spec, u, deriv=0):
    K = spec.n_basis
    out = np.zeros((u.size, K))
    for k in range(K):
        c = np.zeros(K)
        c[k] = 1.0
        s = BSpline(spec.knots, c, spec.degree, extrapolate=False)
        out[:, k] = s.derivative(deriv)(u) if deriv else s(u)
    return out


@pytest.mark.parametrize("deriv", [0, 1, 2])
def test_basis_matches_scipy(deriv, rng):
    spec = BasisSpec(n_interior=7, lower=-1.0, upper=2.0, degree=3)
    u = np.concatenate([points_in(spec, rng), [-1.0 + 1e-9, 0.5, 2.0 - 1e-9]])
    assert np.allclose(basis_matrix(spec, u, deriv), scipy_basis(spec, u, deriv), atol=1e-10)


def test_right_endpoint_is_included():
    spec = BasisSpec(n_interior=4, lower=0.0, upper=1.0)
    row = basis_matrix(spec, [1.0])[0]
    assert row[-1] == pytest.approx(1.0) and row.sum() == pytest.approx(1.0, abs=1e-12)


def test_derivative_rows_match_finite_differences(rng):
    spec = BasisSpec(n_interior=6, lower=0.0, upper=3.0)
    u = rng.uniform(0.01, 2.99, 40)
    h = 1e-6
    fd = (basis_matrix(spec, u + h) - basis_matrix(spec, u - h)) / (2 * h)
    assert np.max(np.abs(basis_matrix(spec, u, 1) - fd)) <= 1e-5


def test_out_of_domain_and_extrapolation():
    spec = BasisSpec(n_interior=5, lower=0.0, upper=1.0)
    with pytest.raises(OutOfDomain):
        basis_matrix(spec, [1.5])
    theta = np.sin(np.arange(spec.n_basis))
    # extrapolation continues the boundary piece: value, slope and curvature stay continuous
    for edge, sgn in ((0.0, -1.0), (1.0, 1.0)):
        for d in (0, 1, 2):
            inside = basis_matrix(spec, [edge], d)[0] @ theta
            outside = basis_matrix(spec, [edge + sgn * 1e-9], d, extrapolate=True)[0] @ theta
            assert outside == pytest.approx(inside, abs=1e-6)
    u = np.array([-0.3, 1.4])
    h = 1e-6
    fd = (basis_matrix(spec, u + h, 0, True) - basis_matrix(spec, u - h, 0, True)) / (2 * h)
    assert np.allclose(basis_matrix(spec, u, 1, True), fd, atol=1e-6)


def test_difference_penalty_examples():
    S = difference_penalty(4, 2)
    for theta in (np.ones(4), np.arange(1.0, 5.0)):
        assert theta @ S @ theta == pytest.approx(0.0, abs=1e-12)
    theta = np.array([0.0, 1.0, 0.0])
    assert theta @ difference_penalty(3, 1) @ theta == pytest.approx(2.0)
    with pytest.raises(InvalidOrder):
        difference_penalty(3, 3)


@pytest.mark.parametrize("K,order", [(5, 2), (8, 1), (14, 3), (10, 2)])
def test_penalty_rank(K, order):
    dec = decompose(difference_penalty(K, order))
    assert (dec.r, dec.null_dim) == (K - order, order)


def test_zero_penalty_is_all_null_space():
    dec = decompose(np.zeros((4, 4)))
    assert dec.r == 0 and dec.null_dim == 4


def test_decomposition_preserves_penalty_and_predictions(rng):
    spec = BasisSpec(n_interior=9, lower=0.0, upper=1.0)
    S = difference_penalty(spec.n_basis, 2)
    dec = decompose(S)
    X = basis_matrix(spec, rng.uniform(0, 1, 30))
    for _ in range(20):
        theta = rng.standard_normal(spec.n_basis)
        tF, w = dec.split(theta)
        assert theta @ S @ theta == pytest.approx(w @ w, rel=1e-9, abs=1e-9)
        assert np.allclose(dec.join(tF, w), theta, atol=1e-9)
        assert np.allclose(X @ theta, dec.fixed_design(X) @ tF + dec.random_design(X) @ w, atol=1e-9)


def test_sum_to_zero_curves_average_to_zero(rng):
    spec = BasisSpec(n_interior=11, lower=-15.0, upper=120.0)
    Z = sum_to_zero_basis(spec)
    grid = np.linspace(spec.lower, spec.upper, 1001)
    curve = basis_matrix(spec, grid) @ (Z @ rng.standard_normal(Z.shape[1]))
    assert abs(curve.mean()) < 1e-12 * max(1.0, np.abs(curve).max())
    ps = PenalizedSpline(spec, 2, sum_to_zero=True)
    assert ps.null_dim + ps.r == spec.n_basis - 1


def test_gamma_star_examples():
    t = np.linspace(0.0, 1.0, 11)
    assert np.allclose(gamma_star(t, 0.0, 1.0, 0.0).value, t)
    s = gamma_star(np.array([-0.6, 1.6]), 0.0, 1.0, 0.2)
    assert np.allclose(s.value, [0.0, 1.0])
    with pytest.raises(DegenerateRange):
        gamma_star(np.zeros(1), 1.0, 1.0, 0.0)


def test_gamma_star_derivative_in_log_shift_sd():
    gamma = np.array([0.1, 0.4, 0.95])

    def f(x):
        return (gamma_star(gamma, 0.0, 1.0, ad.exp(x[0])).value * np.array([1.0, -2.0, 0.5])).sum()

    x = np.array([np.log(0.3)])
    assert np.allclose(ad.grad(f, x), central_diff(f, x), rtol=1e-6)


def test_monotonicity_grid_examples():
    assert np.allclose(monotonicity_grid(BasisSpec(lower=0, upper=1), 3), [0, 0.5, 1])
    assert np.allclose(monotonicity_grid(BasisSpec(lower=-2, upper=2), 5), [-2, -1, 0, 1, 2])
    with pytest.raises(ValueError):
        monotonicity_grid(BasisSpec(), 1)


def test_basis_spec_needs_enough_functions():
    with pytest.raises(ValueError):
        BasisSpec(n_interior=0, degree=3)


@given(specs, st.integers(0, 2**32 - 1))
def test_partition_of_unity_property(spec, seed):
    u = points_in(spec, np.random.default_rng(seed), 1000)
    assert np.max(np.abs(basis_matrix(spec, u).sum(axis=1) - 1.0)) <= 1e-12
    assert np.max(np.abs(basis_matrix(spec, u, 1).sum(axis=1))) <= 1e-10 * max(1.0, spec.n_basis / (spec.upper - spec.lower))


@given(specs, st.integers(0, 2**32 - 1))
def test_taped_basis_gradient_matches_derivative_rows(spec, seed):
    rng = np.random.default_rng(seed)
    u = points_in(spec, rng, 8)
    w = rng.standard_normal(spec.n_basis)
    g = ad.grad(lambda x: (basis_matrix(spec, x) @ w).sum(), u)
    expected = basis_matrix(spec, u, 1) @ w
    assert np.allclose(g, expected, rtol=1e-8, atol=1e-8 * max(1.0, np.abs(expected).max()))
    # the fused primitive agrees with the taped recursion, first and second order
    v1, g1, H1 = ad.value_grad_hessian(lambda x: (spline_eval(spec, x, w) ** 2).sum(), u)
    v2, g2, H2 = ad.value_grad_hessian(lambda x: ((basis_matrix(spec, x) @ w) ** 2).sum(), u)
    scale = max(1.0, np.abs(H2).max())
    assert v1 == pytest.approx(v2, rel=1e-12)
    assert np.allclose(g1, g2, rtol=1e-9, atol=1e-9 * scale)
    assert np.allclose(H1, H2, rtol=1e-8, atol=1e-8 * scale)


@given(specs, st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_reparameterization_property(spec, order, seed):
    if order >= spec.n_basis:
        return
    rng = np.random.default_rng(seed)
    ps = PenalizedSpline(spec, order)
    theta = rng.standard_normal(spec.n_basis)
    tF, w = ps.split(theta)
    assert np.allclose(ps.coefficients(tF, w), theta, atol=1e-9)
    X = basis_matrix(spec, points_in(spec, rng, 20))
    assert np.allclose(X @ theta, X @ ps.T_F @ tF + X @ ps.T_R @ w, atol=1e-9)
    assert theta @ ps.S @ theta == pytest.approx(w @ w, rel=1e-9, abs=1e-9)
