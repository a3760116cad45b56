"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL`` line; the lines are
repeated in the terminal summary (see ``conftest.py``).
"""

import filecmp
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from snmm import ad, cli
from snmm import inference as inf
from snmm import simulate as sim
from snmm.estimator import Problem, ift_gradient, laplace_nll, outer_optimize, starting_values
from snmm.splines import BasisSpec, PenalizedSpline, basis_matrix, difference_penalty

from conftest import central_diff, central_jacobian
from oracles import lmm_marginal_nll, lmm_problem, random_lmm_theta

RESULTS: dict[int, str] = {}
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# ---------------------------------------------------------------------------
# 1. Laplace exactness on a Gaussian model
# ---------------------------------------------------------------------------


def test_criterion_01_laplace_exact_for_linear_mixed_model():
    problem = lmm_problem(seed=0, m=10, n_i=5)
    rng = np.random.default_rng(101)
    worst = 0.0
    with Stopwatch() as clock:
        for _ in range(50):
            theta = random_lmm_theta(problem, rng)
            value, _ = laplace_nll(problem, theta)
            worst = max(worst, abs(value - lmm_marginal_nll(problem, theta)))
    verdict(1, "Laplace exactness", worst <= 1e-8 and clock.seconds < 10,
            f"max |error| {worst:.2e} over 50 draws (limit 1e-8), {clock.seconds:.1f} s (limit 10 s)")


# ---------------------------------------------------------------------------
# 2. Derivatives of the joint density
# ---------------------------------------------------------------------------


def test_criterion_02_joint_derivatives_match_finite_differences():
    scenario = sim.Scenario.sine(m=3, n=10, seed=5)
    data, _ = sim.generate(scenario)
    problem = Problem(sim.fit_spec(scenario), data)
    theta0, psi0 = starting_values(problem)
    n = theta0.size

    def f(z):
        return problem.joint_nld(ad.getitem(z, slice(0, n)), ad.getitem(z, slice(n, None)))

    rng = np.random.default_rng(202)
    worst = 0.0
    with Stopwatch() as clock:
        for _ in range(20):
            x = np.concatenate([theta0 + rng.normal(0, 0.2, n), psi0 + rng.normal(0, 0.3, psi0.size)])
            _, g, H = ad.value_grad_hessian(f, x)
            fd_g = central_diff(lambda z: float(f(z)), x)
            fd_H = central_jacobian(lambda z: ad.grad(f, z), x)
            for exact, approx in ((g, fd_g), (H, fd_H)):
                worst = max(worst, float(np.max(np.abs(exact - approx) / np.maximum(1.0, np.abs(approx)))))
    verdict(2, "AD against finite differences", worst <= 1e-5 and clock.seconds < 30,
            f"max relative error {worst:.2e} over 20 points (limit 1e-5), "
            f"{clock.seconds:.1f} s (limit 30 s)")


# ---------------------------------------------------------------------------
# 3. Spline and penalty identities
# ---------------------------------------------------------------------------


def _random_spec(rng):
    lower = rng.uniform(-50, 50)
    return BasisSpec(n_interior=int(rng.integers(1, 16)), lower=lower,
                     upper=lower + rng.uniform(0.5, 100), degree=int(rng.integers(1, 5)))


def test_criterion_03_spline_and_penalty_identities():
    rng = np.random.default_rng(303)
    worst = {"partition": 0.0, "derivative": 0.0, "null space": 0.0, "round trip": 0.0}
    with Stopwatch() as clock:
        for _ in range(1000):
            spec = _random_spec(rng)
            u = rng.uniform(spec.lower, spec.upper, 20)
            worst["partition"] = max(worst["partition"],
                                     float(np.max(np.abs(basis_matrix(spec, u).sum(axis=1) - 1))))
            worst["derivative"] = max(worst["derivative"],
                                      float(np.max(np.abs(basis_matrix(spec, u, 1).sum(axis=1)))))
        for _ in range(1000):
            K = int(rng.integers(3, 25))
            # linear in the unit-scaled coefficient index, so entries stay of order one
            line = rng.normal() + rng.normal() * np.arange(K) / (K - 1)
            S = difference_penalty(K, 2)
            worst["null space"] = max(worst["null space"], abs(float(line @ S @ line)))
        for _ in range(1000):
            spec = _random_spec(rng)
            order = int(rng.integers(1, min(3, spec.n_basis - 1) + 1))
            ps = PenalizedSpline(spec, order)
            theta = rng.standard_normal(spec.n_basis)
            back = ps.coefficients(*ps.split(theta))
            worst["round trip"] = max(worst["round trip"], float(np.max(np.abs(back - theta))))
    limits = {"partition": 1e-12, "derivative": 1e-10, "null space": 1e-12, "round trip": 1e-9}
    ok = all(worst[k] <= limits[k] for k in limits) and clock.seconds < 10
    detail = ", ".join(f"{k} {worst[k]:.1e} (limit {limits[k]:.0e})" for k in limits)
    verdict(3, "spline and penalty suite", ok, f"{detail}; {clock.seconds:.1f} s (limit 10 s)")


# ---------------------------------------------------------------------------
# 4 and 5. Sine scenario coverage
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sine_study():
    scenario = sim.Scenario.sine(m=20, n=20, sigma2=0.4, variance="low", seed=0)
    with Stopwatch() as clock:
        results, summary = sim.run_replications(scenario, 100, sim.StudyConfig())
    return results, summary, clock.seconds


def test_criterion_04_sine_population_coverage(sine_study):
    _, s, seconds = sine_study
    ok = (s.coverage_population >= 0.88 and math.isfinite(s.width_population_mean)
          and seconds < 7200)
    lo, hi = s.coverage_population_ci
    verdict(4, "sine population coverage", ok,
            f"{s.coverage_population:.3f} [{lo:.3f}, {hi:.3f}] over {s.n_ok} converged of {s.R} "
            f"(limit 0.88), mean width {s.width_population_mean:.3f}, {seconds / 60:.1f} min "
            f"(limit 120 min)")


def test_criterion_05_sine_subject_coverage(sine_study):
    _, s, _ = sine_study
    verdict(5, "sine subject coverage", s.coverage_subjects >= 0.88,
            f"{s.coverage_subjects:.3f} averaged over {s.n_ok} replications (limit 0.88), "
            f"mean width {s.width_subjects_mean:.3f}")


# ---------------------------------------------------------------------------
# 6. Bell scenario coverage
# ---------------------------------------------------------------------------


def test_criterion_06_bell_population_coverage():
    scenario = sim.Scenario.bell(m=20, n=20, sigma2=0.2, seed=0)
    assert sim.fit_spec(scenario).extrapolate
    results, s = sim.run_replications(scenario, 100, sim.StudyConfig(subjects=False))
    lo, hi = s.coverage_population_ci
    verdict(6, "bell population coverage", s.coverage_population >= 0.88,
            f"{s.coverage_population:.3f} [{lo:.3f}, {hi:.3f}] over {s.n_ok} converged of {s.R} "
            f"(limit 0.88), {s.n_failed} excluded")


# ---------------------------------------------------------------------------
# 7. Monotonicity sweep
# ---------------------------------------------------------------------------


def test_criterion_07_monotonicity_sweep():
    slopes = []
    with Stopwatch() as clock:
        for lam in (0.0, 1.0, 5.0, 1000.0):
            scenario = sim.Scenario.cubic(lambda_c=lam, n=200, sigma=0.3, seed=0)
            data, truth = sim.generate(scenario)
            problem = Problem(sim.fit_spec(scenario), data)
            fit = outer_optimize(problem)
            slopes.append(sim.min_slope(fit, problem, truth.grid))
    ok = (all(b >= a for a, b in zip(slopes, slopes[1:])) and slopes[-1] > -0.05
          and clock.seconds < 300)
    verdict(7, "monotonicity trend", ok,
            "min slope " + ", ".join(f"{v:.4f}" for v in slopes)
            + f" for lambda_c 0, 1, 5, 1000 (last must exceed -0.05), {clock.seconds:.1f} s")


# ---------------------------------------------------------------------------
# 8. Parameter recovery at SMOCC scale
# ---------------------------------------------------------------------------


def test_criterion_08_smocc_parameter_recovery():
    truth = {"beta0": 68.2, "sigma": 1.05, "sigma_b1": 2.86}
    est = {k: [] for k in truth}
    covered = 0
    with Stopwatch() as clock:
        for seed in range(20):
            scenario = sim.Scenario.smocc(m=50, seed=seed)
            data, _ = sim.generate(scenario)
            problem = Problem(sim.fit_spec(scenario), data)
            fit = outer_optimize(problem)
            rows = {r.name: r for r in inf.wald_ci(fit, inf.fixed_cov(fit, problem, singular="pinv"))}
            for k in truth:
                est[k].append(rows[k].estimate)
            covered += rows["beta3"].lo <= 1.0 <= rows["beta3"].hi
    medians = {k: float(np.median(v)) for k, v in est.items()}
    close = all(abs(medians[k] - truth[k]) <= 0.1 * truth[k] for k in truth)
    ok = close and covered >= 17 and clock.seconds < 3600
    verdict(8, "SMOCC-scale recovery", ok,
            ", ".join(f"median {k} {medians[k]:.3f} (true {truth[k]})" for k in truth)
            + f"; beta3 interval covers 1.00 in {covered}/20 (limit 17); {clock.seconds / 60:.1f} min")


# ---------------------------------------------------------------------------
# 9. Bootstrap calibration
# ---------------------------------------------------------------------------


def test_criterion_09_bootstrap_calibration():
    scenario = sim.Scenario.linear(n=100, sigma=1.0, seed=0)
    data, _ = sim.generate(scenario)
    problem = Problem(sim.fit_spec(scenario), data)
    with Stopwatch() as clock:
        fit = outer_optimize(problem)
        report = sim.parametric_bootstrap(fit, problem, 200, seed=0)
    ratios = {r.name: r.sd_ratio for r in report.rows}
    ok = all(0.8 <= v <= 1.25 for v in ratios.values()) and report.n_failed == 0 \
        and clock.seconds < 600
    verdict(9, "bootstrap calibration", ok,
            ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
            + f" (limits 0.8 to 1.25), {report.n_failed} failed, {clock.seconds:.1f} s")


# ---------------------------------------------------------------------------
# 10. Determinism of the simulate command
# ---------------------------------------------------------------------------


def test_criterion_10_simulate_is_deterministic(tmp_path):
    config = tmp_path / "tiny.ini"
    shutil.copy(CONFIGS / "tiny_sim.ini", config)
    runs = [("first", "1"), ("second", "1"), ("parallel", "4")]
    codes = [cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / name),
                       "--workers", workers]) for name, workers in runs]
    same = [filecmp.cmp(tmp_path / "first" / f, tmp_path / name / f, shallow=False)
            for name, _ in runs[1:] for f in ("replications.csv", "summary.json")]
    verdict(10, "determinism", codes == [0, 0, 0] and all(same),
            f"exit codes {codes}; outputs byte-identical across reruns and 1 vs 4 workers: {all(same)}")


# ---------------------------------------------------------------------------
# 11. Outer gradient cross-check
# ---------------------------------------------------------------------------


def test_criterion_11_implicit_gradient_matches_finite_differences():
    scenario = sim.Scenario.sine(m=2, n=8, seed=11)
    data, _ = sim.generate(scenario)
    problem = Problem(sim.fit_spec(scenario), data)
    with Stopwatch() as clock:
        theta, psi = starting_values(problem)
        _, state = laplace_nll(problem, theta, psi)
        fd = central_diff(lambda t: laplace_nll(problem, t, state.psi)[0], theta)
        ift = ift_gradient(problem, theta, state.psi)
    worst = float(np.max(np.abs(ift - fd) / np.maximum(1.0, np.abs(fd))))
    verdict(11, "implicit-function gradient", worst <= 1e-4 and clock.seconds < 60,
            f"max relative difference {worst:.2e} (limit 1e-4), {clock.seconds:.1f} s")
