"""Simulation scenarios, replication studies, parametric bootstrap and timing."""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import inference as inf
from .estimator import FitResult, OuterOptions, Problem, outer_optimize
from .model import (Dataset, FitSpec, FixedInterval, MonotonicityConfig, Scaled, parse_model)
from .rng import stream
from .splines import basis_matrix

KINDS = ("sine", "bell", "cubic", "smocc", "linear")

SINE_D = {"low": (0.25, 0.16, 0.04), "high": (1.0, 0.25, 0.16)}
SMOCC_BETA = (68.2, 1.80, 0.00, 1.00)
SMOCC_SIGMA_B = (2.86, 3.28)
SMOCC_SIGMA = 1.05
SMOCC_DOMAIN = (-15.0, 120.0)
SMOCC_SCHEDULE = np.array([0, 2, 4, 8, 13, 17, 21, 26, 35, 43, 52, 61, 69, 78, 91, 104], float)


@dataclass(frozen=True)
class Scenario:
    """A data-generating setting.

    ``sigma`` is the error standard deviation. For ``sine`` and ``bell`` the
    random effects are ``N(0, sigma^2 diag(D))``; for ``smocc`` ``D`` holds
    absolute random-effect standard deviations.
    """

    kind: str
    m: int = 20
    n: int = 20
    sigma: float = math.sqrt(0.4)
    D: tuple = SINE_D["low"]
    seed: int = 0
    lambda_c: float = 0.0
    total_rows: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if any(d < 0 for d in self.D):
            raise ValueError("D entries must be nonnegative")
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be positive")

    @classmethod
    def sine(cls, m=20, n=20, sigma2=0.4, variance="low", seed=0):
        return cls("sine", m=m, n=n, sigma=math.sqrt(sigma2), D=SINE_D[variance], seed=seed)

    @classmethod
    def bell(cls, m=20, n=20, sigma2=0.2, seed=0):
        return cls("bell", m=m, n=n, sigma=math.sqrt(sigma2), D=(2.0, 2.0), seed=seed)

    @classmethod
    def cubic(cls, lambda_c=0.0, n=200, sigma=0.3, seed=0):
        return cls("cubic", m=1, n=n, sigma=sigma, D=(), seed=seed, lambda_c=lambda_c)

    @classmethod
    def smocc(cls, m=50, seed=0, total_rows=None):
        return cls("smocc", m=m, n=1, sigma=SMOCC_SIGMA, D=SMOCC_SIGMA_B, seed=seed,
                   total_rows=total_rows)

    @classmethod
    def linear(cls, n=100, sigma=1.0, seed=0):
        return cls("linear", m=1, n=n, sigma=sigma, D=(), seed=seed)

    @property
    def label(self) -> str:
        if self.kind == "sine":
            var = "high" if tuple(self.D) == SINE_D["high"] else "low"
            return f"sine(n={self.n},m={self.m},sigma2={self.sigma ** 2:.3g},{var})"
        if self.kind == "bell":
            return f"bell(n={self.n},m={self.m},sigma2={self.sigma ** 2:.3g})"
        if self.kind == "cubic":
            return f"cubic(lambda_c={self.lambda_c:g})"
        return f"{self.kind}(m={self.m})"


def sine_grid(settings=("high", "low")):
    """The 16 sine settings ordered by (n, m), then sigma^2 = 1, 0.4, then variance."""
    out = []
    for n, m in ((10, 10), (10, 20), (20, 10), (20, 20)):
        for s2 in (1.0, 0.4):
            for v in settings:
                out.append(Scenario.sine(m=m, n=n, sigma2=s2, variance=v))
    return out


def bell_grid():
    """The 8 bell settings: (n, m) in (10,10), (20,10), (10,20), (20,20) for each error variance."""
    return [Scenario.bell(m=m, n=n, sigma2=s2)
            for s2 in (0.2, 0.4) for n, m in ((10, 10), (20, 10), (10, 20), (20, 20))]


# ---------------------------------------------------------------------------
# Truth and data generation
# ---------------------------------------------------------------------------


def _ilogit(x):
    return 1.0 / (1.0 + np.exp(-x))


def smocc_height(a):
    """Smooth stand-in for mean infant height (cm) at age ``a`` weeks."""
    return 98.08 - 48.08 * np.exp(-np.asarray(a, float) / 70.8)


def smocc_curve(u):
    """Generating population curve: height profile centered over the knot domain."""
    grid = np.linspace(*SMOCC_DOMAIN, 1001)
    return smocc_height(u) - float(np.mean(smocc_height(grid)))


@dataclass
class Truth:
    """Generating values: random effects plus curve evaluators on the time scale."""

    b: np.ndarray
    population: Callable
    subject: Callable
    grid: np.ndarray
    params: dict = field(default_factory=dict)


def generate(scenario: Scenario, rep: int = 0) -> tuple[Dataset, Truth]:
    """Simulate one dataset; deterministic in ``(scenario.seed + rep, kind)``."""
    rng = stream(scenario.seed + rep, scenario.kind)
    return _GENERATORS[scenario.kind](scenario, rng)


def _gen_sine(sc: Scenario, rng):
    m, n, s = sc.m, sc.n, sc.sigma
    t = np.arange(n + 1) / n
    b = rng.standard_normal((m, 3)) * s * np.sqrt(np.asarray(sc.D))
    eps = rng.standard_normal((m, n + 1)) * s

    def curve(bi, tt):
        return 1.0 + bi[0] + math.exp(bi[1]) * np.sin(2 * math.pi * (tt - _ilogit(bi[2])))

    y = np.stack([curve(b[i], t) for i in range(m)]) + eps
    data = Dataset(subject=np.repeat(np.arange(m), n + 1), y=y.ravel(),
                   covariates={"t": np.tile(t, m)}, time="t")
    grid = np.linspace(0.0, 1.0, 100)
    return data, Truth(b=b, population=lambda g: curve(np.zeros(3), g),
                       subject=lambda i, g: curve(b[i], g), grid=grid,
                       params={"sigma": s, "sigma_b": s * np.sqrt(np.asarray(sc.D))})


def _gen_bell(sc: Scenario, rng):
    m, n, s = sc.m, sc.n, sc.sigma
    t = np.linspace(-4.0, 4.0, n + 1)
    b = rng.standard_normal((m, 2)) * s * np.sqrt(np.asarray(sc.D))
    eps = rng.standard_normal((m, n + 1)) * s

    def curve(bi, tt):
        return 1.0 + bi[0] + np.exp(-0.5 * (tt - bi[1]) ** 2)

    y = np.stack([curve(b[i], t) for i in range(m)]) + eps
    data = Dataset(subject=np.repeat(np.arange(m), n + 1), y=y.ravel(),
                   covariates={"t": np.tile(t, m)}, time="t")
    grid = np.linspace(-4.0, 4.0, 100)
    return data, Truth(b=b, population=lambda g: curve(np.zeros(2), g),
                       subject=lambda i, g: curve(b[i], g), grid=grid,
                       params={"sigma": s, "sigma_b": s * np.sqrt(np.asarray(sc.D))})


def _gen_cubic(sc: Scenario, rng):
    x = np.linspace(-2.0, 2.0, sc.n)
    y = x ** 3 - x + sc.sigma * rng.standard_normal(sc.n)
    data = Dataset(subject=np.zeros(sc.n, int), y=y, covariates={"x": x}, time="x")
    grid = np.linspace(-2.0, 2.0, 400)
    return data, Truth(b=np.zeros((1, 0)), population=lambda g: np.asarray(g) ** 3 - np.asarray(g),
                       subject=lambda i, g: np.asarray(g) ** 3 - np.asarray(g), grid=grid,
                       params={"sigma": sc.sigma})


def _gen_linear(sc: Scenario, rng):
    x = np.linspace(0.0, 1.0, sc.n)
    z = rng.standard_normal(sc.n)
    y = 1.0 + 2.0 * x + 0.5 * z + sc.sigma * rng.standard_normal(sc.n)
    data = Dataset(subject=np.zeros(sc.n, int), y=y, covariates={"x": x, "z": z}, time="x")
    grid = np.linspace(0.0, 1.0, 50)
    return data, Truth(b=np.zeros((1, 0)), population=lambda g: 1.0 + 2.0 * np.asarray(g),
                       subject=lambda i, g: 1.0 + 2.0 * np.asarray(g), grid=grid,
                       params={"sigma": sc.sigma, "beta1": 0.5})


def _visit_counts(rng, m, total):
    n_i = rng.integers(6, 13, size=m)
    if total is not None:
        if not 6 * m <= total <= 12 * m:
            raise ValueError(f"cannot spread {total} rows over {m} subjects with 6-12 visits each")
        while n_i.sum() != total:
            i = int(rng.integers(m))
            if n_i.sum() < total and n_i[i] < 12:
                n_i[i] += 1
            elif n_i.sum() > total and n_i[i] > 6:
                n_i[i] -= 1
    return n_i


def _gen_smocc(sc: Scenario, rng):
    m = sc.m
    beta = np.asarray(SMOCC_BETA)
    sb = np.asarray(sc.D)
    n_i = _visit_counts(rng, m, sc.total_rows)
    sex = (rng.random(m) < 0.5).astype(float)
    ga = np.clip(np.round(rng.normal(-0.5, 1.7, m)), -8, 2)  # weeks relative to term
    b = rng.standard_normal((m, 2)) * sb
    rows = {"subject": [], "age": [], "sex": [], "GA": []}
    for i in range(m):
        visits = np.sort(rng.choice(SMOCC_SCHEDULE.size, size=n_i[i], replace=False))
        age = np.clip(SMOCC_SCHEDULE[visits] + rng.uniform(-1.0, 1.0, n_i[i]), 0.0, None)
        rows["subject"].append(np.full(n_i[i], i))
        rows["age"].append(age)
        rows["sex"].append(np.full(n_i[i], sex[i]))
        rows["GA"].append(np.full(n_i[i], ga[i]))
    cols = {k: np.concatenate(v) for k, v in rows.items()}
    subj = cols.pop("subject").astype(int)

    def curve(i_sex, i_ga, bi, age):
        return (beta[0] + beta[1] * i_sex + bi[0]
                + np.exp(beta[2] * np.asarray(i_sex, float)) * smocc_curve(age + beta[3] * i_ga + bi[1]))

    mu = curve(cols["sex"], cols["GA"], b[subj].T, cols["age"])
    y = mu + sc.sigma * rng.standard_normal(mu.size)
    data = Dataset(subject=subj, y=y, covariates=cols, time="age")
    grid = np.linspace(0.0, 104.0, 100)
    return data, Truth(b=b, population=lambda g: curve(0.0, 0.0, np.zeros(2), np.asarray(g)),
                       subject=lambda i, g: curve(sex[i], ga[i], b[i], np.asarray(g)), grid=grid,
                       params={"beta": beta, "sigma_b": sb, "sigma": sc.sigma})


_GENERATORS = {"sine": _gen_sine, "bell": _gen_bell, "cubic": _gen_cubic, "smocc": _gen_smocc,
               "linear": _gen_linear}


SMOCC_MODEL = "beta0 + beta1*sex + b1 + exp(beta2*sex)*f(age + beta3*GA + b3)"


def fit_spec(scenario: Scenario) -> FitSpec:
    """The model fitted to a scenario's data."""
    k = scenario.kind
    if k == "sine":
        return FitSpec(parse_model("1 + b1 + exp(b2)*f(t - ilogit(b3))"),
                       knots=FixedInterval(-1.0, 1.0), n_interior=10)
    if k == "bell":
        return FitSpec(parse_model("1 + b1 + f(t - b2)"), knots=Scaled(shift=2, c=3.0),
                       n_interior=10, extrapolate=True)
    if k == "cubic":
        mono = MonotonicityConfig(lambda_c=scenario.lambda_c) if scenario.lambda_c > 0 else None
        return FitSpec(parse_model("f(x)"), knots=FixedInterval(-2.0, 2.0), n_interior=10,
                       monotonicity=mono)
    if k == "smocc":
        return FitSpec(parse_model(SMOCC_MODEL), knots=FixedInterval(*SMOCC_DOMAIN),
                       n_interior=11, sum_to_zero=True)
    return FitSpec(parse_model("beta1*z + f(x)"), knots=FixedInterval(0.0, 1.0), n_interior=1,
                   degree=1, penalty_order=0)


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------


@dataclass
class RepResult:
    rep: int
    seed: int
    converged: bool
    covered_population: Optional[bool] = None
    covered_subjects: Optional[float] = None
    width_population: float = math.nan
    width_subjects: float = math.nan
    min_slope: float = math.nan
    estimates: dict = field(default_factory=dict)
    nll: float = math.nan
    iterations: int = 0
    wall_time: float = 0.0
    error: str = ""


@dataclass(frozen=True)
class StudyConfig:
    alpha: float = 0.05
    n_sim: int = 10000
    grid_size: int = 100
    subjects: bool = True
    options: OuterOptions = OuterOptions()


def min_slope(fit: FitResult, problem: Problem, grid) -> float:
    coef = problem.coef_from(fit.theta, fit.psi)
    return float(np.min(basis_matrix(problem.basis, grid, deriv=1) @ coef))


def run_one(scenario: Scenario, rep: int, config: StudyConfig = StudyConfig()) -> RepResult:
    """Generate, fit and score one replication. Failures are recorded, not raised."""
    t0 = time.perf_counter()
    seed = scenario.seed + rep
    try:
        data, truth = generate(scenario, rep)
        problem = Problem(fit_spec(scenario), data)
        fit = outer_optimize(problem, options=config.options)
    except Exception as exc:  # noqa: BLE001 - a failed replication is data
        return RepResult(rep=rep, seed=seed, converged=False, error=f"{type(exc).__name__}: {exc}",
                         wall_time=time.perf_counter() - t0)
    res = RepResult(rep=rep, seed=seed, converged=fit.converged, nll=fit.nll,
                    iterations=fit.iterations, estimates=_estimates(fit))
    try:
        if scenario.kind == "cubic":
            res.min_slope = min_slope(fit, problem, truth.grid)
        if fit.converged and scenario.kind != "cubic":
            grid = np.linspace(truth.grid[0], truth.grid[-1], config.grid_size)
            cov = inf.fixed_cov(fit, problem, singular="pinv", options=config.options)
            pcov = inf.prediction_cov(fit, problem, cov)
            band = inf.curve_band(fit, problem, pcov, inf.Population(), grid, config.alpha,
                                  config.n_sim, seed=seed)
            res.covered_population = band.covers(truth.population(grid))
            res.width_population = band.width
            if config.subjects and problem.layout.q:
                hits, widths = [], []
                for i in range(data.m):
                    sb = inf.curve_band(fit, problem, pcov, inf.Subject(i), grid, config.alpha,
                                        config.n_sim, seed=seed)
                    hits.append(sb.covers(truth.subject(i, grid)))
                    widths.append(sb.width)
                res.covered_subjects = float(np.mean(hits))
                res.width_subjects = float(np.mean(widths))
    except Exception as exc:  # noqa: BLE001
        res.error = f"{type(exc).__name__}: {exc}"
        res.converged = False
    res.wall_time = time.perf_counter() - t0
    return res


def _estimates(fit: FitResult) -> dict:
    p = fit.params
    out = {f"beta{lab}": float(v) for lab, v in zip(fit.layout.beta_labels, p.beta)}
    for k, v in enumerate(p.sigma_b):
        out[f"sigma_b{k + 1}"] = float(v)
    out["sigma"] = p.sigma
    if p.log_sigma_omega is not None:
        out["sigma_omega"] = math.exp(p.log_sigma_omega)
    return out


def _star(args):
    fn, a = args
    return fn(*a)


def parallel_map(fn, arg_list, workers: int = 1) -> list:
    """Ordered map over argument tuples, optionally in worker processes."""
    if workers <= 1 or len(arg_list) <= 1:
        return [fn(*a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_star, [(fn, a) for a in arg_list]))


def binomial_ci(p: float, R: int) -> tuple[float, float]:
    if R == 0 or math.isnan(p):
        return math.nan, math.nan
    h = 1.96 * math.sqrt(p * (1.0 - p) / R)
    return max(0.0, p - h), min(1.0, p + h)


@dataclass
class StudySummary:
    scenario: str
    R: int
    n_ok: int
    n_failed: int
    coverage_population: float
    coverage_population_ci: tuple
    coverage_subjects: float
    width_population_mean: float
    width_population_quartiles: tuple
    width_subjects_mean: float
    runtime_median: float
    runtime_quartiles: tuple


def summarize(scenario: Scenario, results: list[RepResult]) -> StudySummary:
    ok = [r for r in results if r.converged and r.covered_population is not None]
    cov = float(np.mean([r.covered_population for r in ok])) if ok else math.nan
    subj = [r.covered_subjects for r in ok if r.covered_subjects is not None]
    widths = np.array([r.width_population for r in ok]) if ok else np.array([math.nan])
    wsub = [r.width_subjects for r in ok if r.covered_subjects is not None]
    times = np.array([r.wall_time for r in results]) if results else np.array([math.nan])
    return StudySummary(
        scenario=scenario.label, R=len(results), n_ok=len(ok), n_failed=len(results) - len(ok),
        coverage_population=cov, coverage_population_ci=binomial_ci(cov, len(ok)),
        coverage_subjects=float(np.mean(subj)) if subj else math.nan,
        width_population_mean=float(np.mean(widths)),
        width_population_quartiles=tuple(float(v) for v in np.quantile(widths, [0.25, 0.5, 0.75])),
        width_subjects_mean=float(np.mean(wsub)) if wsub else math.nan,
        runtime_median=float(np.median(times)),
        runtime_quartiles=tuple(float(v) for v in np.quantile(times, [0.25, 0.75])))


def run_replications(scenario: Scenario, R: int, config: StudyConfig = StudyConfig(),
                     workers: int = 1) -> tuple[list[RepResult], StudySummary]:
    if R < 1:
        raise ValueError("R must be at least 1")
    results = parallel_map(run_one, [(scenario, rep, config) for rep in range(R)], workers)
    return results, summarize(scenario, results)


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


@dataclass
class BootstrapRow:
    name: str
    estimate: float
    boot_mean: float
    boot_sd: float
    se: float  # asymptotic SE at the original fit
    mean_se: float  # average asymptotic SE over replicates (nan when not computed)

    @property
    def bias(self) -> float:
        return self.boot_mean - self.estimate

    @property
    def sd_ratio(self) -> float:
        return self.boot_sd / self.se if self.se > 0 else math.nan


@dataclass
class BootstrapReport:
    rows: list
    R: int
    n_failed: int
    replicates: list = field(default_factory=list)  # per replicate: dict of estimates or error


def natural_params(fit: FitResult, cov=None) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Names, values and (delta-method) SEs of theta_F, beta, sigma_b and sigma."""
    L = fit.layout
    names = [f"theta_F{i}" for i in range(L.n_fixed_spline)]
    vals = list(fit.theta[L.theta_F])
    ses = list(np.sqrt(np.clip(np.diag(cov.matrix)[L.theta_F], 0, None))) if cov is not None \
        else [math.nan] * L.n_fixed_spline
    rows = inf.wald_ci(fit, cov) if cov is not None else None
    p = fit.params
    plain = [(f"beta{lab}", float(v)) for lab, v in zip(L.beta_labels, p.beta)]
    plain += [(f"sigma_b{k + 1}", float(v)) for k, v in enumerate(p.sigma_b)]
    plain.append(("sigma", p.sigma))
    for j, (name, v) in enumerate(plain):
        names.append(name)
        vals.append(v)
        ses.append(rows[j].se if rows is not None else math.nan)
    return names, np.asarray(vals, float), np.asarray(ses, float)


def simulate_from_fit(fit: FitResult, problem: Problem, rng, noise: bool = True,
                      resample_b: bool = True) -> Dataset:
    """New responses from the fitted model: fresh ``b`` and noise, fitted curve held fixed."""
    L = problem.layout
    p = fit.params
    psi = fit.psi.copy()
    if resample_b and L.q:
        b = rng.standard_normal((L.m, L.q)) * p.sigma_b
        psi[:L.n_b] = b.ravel()
    parts = problem._parts(fit.theta)
    bvals = {label: psi[problem.b_index[:, k]] for label, k in problem.b_slot.items()}
    coef = problem.coefficients(parts.theta_F, psi[L.n_b:])
    eta = np.broadcast_to(np.asarray(problem.eta(parts, bvals, coef), float), problem.y.shape)
    y = eta + (p.sigma * rng.standard_normal(eta.shape) if noise else 0.0)
    return problem.data.with_y(y)


def _boot_one(fit: FitResult, spec: FitSpec, data: Dataset, seed: int, rep: int,
              per_rep_se: bool, options: OuterOptions, noise: bool, resample_b: bool):
    problem = Problem(spec, data)
    rng = stream(seed, rep, "bootstrap")
    try:
        boot = simulate_from_fit(fit, problem, rng, noise, resample_b)
        bp = Problem(spec, boot)
        bfit = outer_optimize(bp, theta0=fit.theta, psi0=fit.psi, options=options)
        cov = inf.fixed_cov(bfit, bp, singular="pinv", options=options) if per_rep_se else None
        names, vals, ses = natural_params(bfit, cov)
        return {"rep": rep, "converged": bfit.converged, "values": vals, "ses": ses, "error": ""}
    except Exception as exc:  # noqa: BLE001
        return {"rep": rep, "converged": False, "values": None, "ses": None,
                "error": f"{type(exc).__name__}: {exc}"}


def parametric_bootstrap(fit: FitResult, problem: Problem, R: int, seed: int = 0,
                         workers: int = 1, per_rep_se: bool = False, cov=None,
                         options: OuterOptions = OuterOptions(), noise: bool = True,
                         resample_b: bool = True) -> BootstrapReport:
    """Refit on ``R`` datasets simulated from the fit (``omega`` held at its fitted value)."""
    if R < 0:
        raise ValueError("R must be nonnegative")
    if R == 0:
        return BootstrapReport(rows=[], R=0, n_failed=0)
    if cov is None:
        cov = inf.fixed_cov(fit, problem, singular="pinv", options=options)
    names, est, se = natural_params(fit, cov)
    reps = parallel_map(_boot_one, [(fit, problem.spec, problem.data, seed, r, per_rep_se, options,
                                     noise, resample_b) for r in range(R)], workers)
    good = [r for r in reps if r["values"] is not None and r["converged"]]
    vals = np.array([r["values"] for r in good]) if good else np.full((0, len(names)), math.nan)
    rows = []
    for j, name in enumerate(names):
        col = vals[:, j]
        rows.append(BootstrapRow(
            name=name, estimate=float(est[j]),
            boot_mean=float(np.mean(col)) if col.size else math.nan,
            boot_sd=float(np.std(col, ddof=1)) if col.size > 1 else math.nan,
            se=float(se[j]),
            mean_se=float(np.mean([r["ses"][j] for r in good])) if per_rep_se and good else math.nan))
    return BootstrapReport(rows=rows, R=R, n_failed=R - len(good), replicates=reps)


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRow:
    scenario: str
    m: int
    n: int
    R: int
    median: float
    q1: float
    q3: float
    n_converged: int


def _time_fit(scenario: Scenario, rep: int, options: OuterOptions):
    data, _ = generate(scenario, rep)
    t0 = time.perf_counter()
    try:
        fit = outer_optimize(Problem(fit_spec(scenario), data), options=options)
        ok = fit.converged
    except Exception:  # noqa: BLE001
        ok = False
    return time.perf_counter() - t0, ok


def benchmark(scenarios, R: int = 1, options: OuterOptions = OuterOptions(),
              workers: int = 1) -> list[BenchmarkRow]:
    """Wall-clock time per fit (median and quartiles) for each setting."""
    rows = []
    for sc in scenarios:
        out = [_time_fit(sc, rep, options) for rep in range(R)] if workers <= 1 else \
            parallel_map(_time_fit, [(sc, rep, options) for rep in range(R)], workers)
        t = np.array([o[0] for o in out]) if out else np.array([math.nan])
        rows.append(BenchmarkRow(scenario=sc.label, m=sc.m, n=sc.n, R=R,
                                 median=float(np.median(t)), q1=float(np.quantile(t, 0.25)),
                                 q3=float(np.quantile(t, 0.75)),
                                 n_converged=sum(o[1] for o in out)))
    _check_trend(rows)
    return rows


def _check_trend(rows: list[BenchmarkRow]) -> bool:
    """Warn when the median time drops as the subject count grows (same kind and n)."""
    ok = True
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.scenario.split("(")[0], r.n), []).append(r)
    for g in groups.values():
        g = sorted(g, key=lambda r: r.m)
        for a, b in zip(g, g[1:]):
            if b.m > a.m and b.median < a.median:
                ok = False
                warnings.warn(f"median runtime decreased from m={a.m} to m={b.m} ({a.scenario})",
                              RuntimeWarning, stacklevel=2)
    return ok
