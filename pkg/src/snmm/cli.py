"""Command-line front end.

    snmm {fit,simulate,bootstrap,predict,benchmark} --config PATH [--seed N] [--workers N] [--out DIR]

The configuration is an INI file; see README.md for the recognised keys.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import inference as inf
from . import simulate as sim
from .estimator import InnerFailure, OuterOptions, Problem, inner_solve, outer_optimize
from .model import (ColumnMap, CsvParseError, Dataset, FitSpec, FixedInterval, MissingColumn,
                    ModelSyntaxError, MonotonicityConfig, Scaled, UnboundName, load_csv,
                    parse_model)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NOCONV = 0, 2, 3, 4
COMMANDS = ("fit", "simulate", "bootstrap", "predict", "benchmark")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Formatting
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """Numbers with 12 significant digits; integers and strings unchanged."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.12g}"
    if x is None:
        return ""
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not math.isfinite(x) else float(f"{x:.12g}")
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, header: list[str], rows: list[list], meta: dict) -> None:
    buf = io.StringIO()
    for k in ("tool", "version", "config_sha256", "seed"):
        buf.write(f"# {k}: {meta[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    path: Path
    parser: configparser.ConfigParser
    config_hash: str
    seed: int = 0
    workers: int = 1
    out: Path = Path("results")
    alpha: float = 0.05
    n_sim: int = 10000
    grid_size: int = 100
    options: OuterOptions = field(default_factory=OuterOptions)

    @property
    def meta(self) -> dict:
        return {"tool": "snmm", "version": __version__, "config_sha256": self.config_hash,
                "seed": self.seed}

    def get(self, section, key, default=None, kind=str):
        if not self.parser.has_option(section, key):
            if default is ConfigError:
                raise ConfigError(f"[{section}] {key} is required")
            return default
        raw = self.parser.get(section, key).strip()
        try:
            if kind is bool:
                return self.parser.getboolean(section, key)
            if kind == "floats":
                return [float(v) for v in raw.split(",") if v.strip()]
            if kind == "ints":
                return [int(v) for v in raw.split(",") if v.strip()]
            if kind == "strs":
                return [v.strip() for v in raw.split(",") if v.strip()]
            return kind(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {getattr(kind, '__name__', kind)}") from None


def load_config(command: str, path, seed=None, workers=None, out=None) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(raw.decode("utf-8"), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    cfg = RunConfig(command=command, path=path, parser=parser,
                    config_hash=hashlib.sha256(raw).hexdigest())
    cfg.seed = seed if seed is not None else cfg.get("run", "seed", 0, int)
    cfg.workers = workers if workers is not None else cfg.get("run", "workers", 1, int)
    cfg.out = Path(out) if out is not None else Path(cfg.get("run", "out", "results"))
    if not cfg.out.is_absolute() and out is None:
        cfg.out = path.parent / cfg.out
    cfg.alpha = cfg.get("inference", "alpha", 0.05, float)
    cfg.n_sim = cfg.get("inference", "n_sim", 10000, int)
    cfg.grid_size = cfg.get("inference", "grid_size", 100, int)
    cfg.options = OuterOptions(gtol=cfg.get("optimizer", "gtol", 1e-5, float),
                               ftol=cfg.get("optimizer", "ftol", 1e-9, float),
                               max_iter=cfg.get("optimizer", "max_iter", 500, int))
    if not 0 < cfg.alpha < 1:
        raise ConfigError("[inference] alpha must be in (0, 1)")
    if cfg.n_sim < 1000:
        raise ConfigError("[inference] n_sim must be at least 1000")
    if cfg.grid_size < 2:
        raise ConfigError("[inference] grid_size must be at least 2")
    if cfg.workers < 1:
        raise ConfigError("workers must be positive")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")
    return cfg


def fit_spec_from(cfg: RunConfig) -> FitSpec:
    text = cfg.get("model", "formula", ConfigError)
    try:
        model = parse_model(text)
    except ModelSyntaxError as exc:
        raise ConfigError(f"[model] formula: {exc}") from None
    strategy = cfg.get("basis", "strategy", "interval")
    if strategy == "interval":
        dom = cfg.get("basis", "domain", ConfigError, "floats")
        if len(dom) != 2 or not dom[0] < dom[1]:
            raise ConfigError("[basis] domain must be 'lower, upper' with lower < upper")
        knots = FixedInterval(dom[0], dom[1])
    elif strategy == "scaled":
        shift = cfg.get("basis", "shift", ConfigError)
        if not shift.startswith("b") or not shift[1:].isdigit():
            raise ConfigError("[basis] shift must name a random effect such as b2")
        knots = Scaled(shift=int(shift[1:]), c=cfg.get("basis", "c", 3.0, float))
    else:
        raise ConfigError("[basis] strategy must be 'interval' or 'scaled'")
    lam = cfg.get("monotonicity", "lambda_c", 0.0, float)
    mono = None
    if lam:
        try:
            mono = MonotonicityConfig(lambda_c=lam, eps=cfg.get("monotonicity", "eps", 1e-6, float),
                                      M=cfg.get("monotonicity", "M", 200, int))
        except ValueError as exc:
            raise ConfigError(f"[monotonicity] {exc}") from None
    try:
        return FitSpec(model=model, knots=knots,
                       n_interior=cfg.get("basis", "interior_knots", 10, int),
                       degree=cfg.get("basis", "degree", 3, int),
                       penalty_order=cfg.get("basis", "penalty_order", 2, int),
                       sum_to_zero=cfg.get("basis", "sum_to_zero", False, bool),
                       extrapolate=cfg.get("basis", "extrapolate", False, bool),
                       monotonicity=mono)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dataset_from(cfg: RunConfig) -> Dataset:
    scenario = cfg.get("data", "scenario")
    if scenario:
        sc = scenario_from(cfg, "data", scenario)
        return sim.generate(sc, 0)[0]
    path = cfg.get("data", "path", ConfigError)
    path = Path(path) if Path(path).is_absolute() else cfg.path.parent / path
    cols = ColumnMap(subject=cfg.get("data", "subject", "subject"),
                     y=cfg.get("data", "response", "y"), time=cfg.get("data", "time", "t"),
                     covariates=tuple(cfg.get("data", "covariates", [], "strs")))
    try:
        return load_csv(path, cols)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except (MissingColumn, CsvParseError) as exc:
        raise DataError(str(exc)) from None
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


def scenario_from(cfg: RunConfig, section: str, kind: str, **over) -> sim.Scenario:
    def get(key, default, kind=str):
        return over[key] if key in over else cfg.get(section, key, default, kind)

    try:
        if kind == "sine":
            return sim.Scenario.sine(m=get("m", 20, int), n=get("n", 20, int),
                                     sigma2=get("sigma2", 0.4, float),
                                     variance=get("variance", "low"), seed=cfg.seed)
        if kind == "bell":
            return sim.Scenario.bell(m=get("m", 20, int), n=get("n", 20, int),
                                     sigma2=get("sigma2", 0.2, float), seed=cfg.seed)
        if kind == "cubic":
            return sim.Scenario.cubic(lambda_c=get("lambda_c", 0.0, float), n=get("n", 200, int),
                                      sigma=get("sigma", 0.3, float), seed=cfg.seed)
        if kind == "smocc":
            rows = get("total_rows", None, int)
            return sim.Scenario.smocc(m=get("m", 200, int), seed=cfg.seed, total_rows=rows)
        if kind == "linear":
            return sim.Scenario.linear(n=get("n", 100, int), sigma=get("sigma", 1.0, float),
                                       seed=cfg.seed)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[{section}] invalid scenario settings: {exc}") from None
    raise ConfigError(f"[{section}] unknown scenario {kind!r} (sine, bell, cubic, smocc, linear)")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _band_rows(band: inf.Band):
    return [[g, e, s, a, b, c, d] for g, e, s, a, b, c, d in
            zip(band.grid, band.estimate, band.se, band.pw_lo, band.pw_hi, band.sim_lo, band.sim_hi)]


BAND_HEADER = ["grid", "estimate", "se", "pw_lo", "pw_hi", "sim_lo", "sim_hi"]


def _grid(cfg: RunConfig, data: Dataset) -> np.ndarray:
    lo = cfg.get("inference", "grid_lower", float(np.min(data.t)), float)
    hi = cfg.get("inference", "grid_upper", float(np.max(data.t)), float)
    return np.linspace(lo, hi, cfg.grid_size)


def _subjects(cfg: RunConfig, data: Dataset) -> list[int]:
    sel = cfg.get("inference", "subjects", "none")
    if sel == "none":
        return []
    if sel == "all":
        return list(range(data.m))
    index = {sid: i for i, sid in enumerate(data.subject_ids)}
    out = []
    for s in (v.strip() for v in sel.split(",")):
        if s not in index:
            raise ConfigError(f"[inference] subjects: unknown subject id {s!r}")
        out.append(index[s])
    return out


def _write_bands(cfg, fit, problem, pcov, data, prefix="band"):
    grid = _grid(cfg, data)
    reference = {name: cfg.get("reference", name, 0.0, float) for name in data.covariates}
    band = inf.curve_band(fit, problem, pcov, inf.Population(reference), grid, cfg.alpha,
                          cfg.n_sim, seed=cfg.seed)
    write_csv(cfg.out / f"{prefix}_population.csv", BAND_HEADER, _band_rows(band), cfg.meta)
    for i in _subjects(cfg, data):
        sb = inf.curve_band(fit, problem, pcov, inf.Subject(i), grid, cfg.alpha, cfg.n_sim,
                            seed=cfg.seed)
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in data.subject_ids[i])
        write_csv(cfg.out / f"{prefix}_subject_{safe}.csv", BAND_HEADER, _band_rows(sb), cfg.meta)
    return band


def _param_rows(fit, cov, alpha, problem):
    rows = inf.wald_ci(fit, cov, alpha)
    effects = problem.spec.b_labels
    out = []
    for r in rows:
        row = {"name": r.name, "estimate": r.estimate, "se": r.se, "ci_lower": r.lo, "ci_upper": r.hi}
        if r.name.startswith("sigma_b"):
            row["effect"] = f"b{effects[int(r.name[7:]) - 1]}"
        out.append(row)
    return out


def cmd_fit(cfg: RunConfig) -> int:
    spec = fit_spec_from(cfg)
    data = dataset_from(cfg)
    try:
        problem = Problem(spec, data)
    except UnboundName as exc:
        raise DataError(str(exc)) from None
    cfg.out.mkdir(parents=True, exist_ok=True)
    fit = outer_optimize(problem, options=cfg.options)
    cov = inf.fixed_cov(fit, problem, singular="pinv", options=cfg.options)
    pcov = inf.prediction_cov(fit, problem, cov)
    _write_bands(cfg, fit, problem, pcov, data)
    params = {
        "meta": cfg.meta,
        "model": cfg.get("model", "formula"),
        "parameters": _param_rows(fit, cov, cfg.alpha, problem),
        "smoothing": _row_dict(inf.smoothing_ci(fit, cov, cfg.alpha)),
        "aic": inf.marginal_aic(fit),
        "nll": fit.nll,
        "converged": fit.converged,
        "gradient_norm": fit.grad_norm,
        "theta_labels": problem.layout.theta_labels,
        "theta_hat": fit.theta,
        "cov_theta": cov.matrix,
        "information_condition": cov.condition,
        "floored_directions": cov.floored,
    }
    write_json(cfg.out / "params.json", params)
    write_json(cfg.out / "fit_report.json", {
        "meta": cfg.meta, "converged": fit.converged, "message": fit.message,
        "iterations": fit.iterations, "n_evals": fit.n_evals,
        "n_inner_iterations": fit.n_inner_iterations, "gradient": fit.grad,
        "nll_trace": fit.trace, "wall_time": fit.wall_time, "N": data.N, "m": data.m})
    if not fit.converged:
        print(f"warning: optimizer did not converge ({fit.message}); outputs written", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def _row_dict(r):
    if r is None:
        return None
    return {"name": r.name, "estimate": r.estimate, "se": r.se, "ci_lower": r.lo, "ci_upper": r.hi}


REP_HEADER = ["setting", "rep", "seed", "converged", "covered_population", "covered_subjects",
              "width_population", "width_subjects", "min_slope", "nll", "sigma", "sigma_b1",
              "sigma_b2", "sigma_b3", "sigma_omega", "error"]


def _study_config(cfg: RunConfig) -> sim.StudyConfig:
    return sim.StudyConfig(alpha=cfg.alpha, n_sim=cfg.n_sim, grid_size=cfg.grid_size,
                           subjects=cfg.get("simulate", "subjects", True, bool), options=cfg.options)


def _scenarios(cfg: RunConfig) -> list[sim.Scenario]:
    kind = cfg.get("simulate", "scenario", ConfigError)
    if cfg.get("simulate", "full_grid", False, bool):
        if kind == "sine":
            return [sim.Scenario.sine(m=s.m, n=s.n, sigma2=s.sigma ** 2,
                                      variance="high" if s.D == sim.SINE_D["high"] else "low",
                                      seed=cfg.seed) for s in sim.sine_grid()]
        if kind == "bell":
            return [sim.Scenario.bell(m=s.m, n=s.n, sigma2=s.sigma ** 2, seed=cfg.seed)
                    for s in sim.bell_grid()]
        raise ConfigError("[simulate] full_grid is available for sine and bell")
    if kind == "cubic":
        lams = cfg.get("simulate", "lambda_c", [0.0, 1.0, 5.0, 1000.0], "floats")
        return [scenario_from(cfg, "simulate", "cubic", lambda_c=lam) for lam in lams]
    return [scenario_from(cfg, "simulate", kind)]


def cmd_simulate(cfg: RunConfig) -> int:
    R = cfg.get("simulate", "R", 100, int)
    if R < 1:
        raise ConfigError("[simulate] R must be at least 1")
    scenarios = _scenarios(cfg)
    study = _study_config(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    jobs = [(sc, rep, study) for sc in scenarios for rep in range(R)]
    results = sim.parallel_map(sim.run_one, jobs, cfg.workers)
    rows, summaries, timings = [], [], []
    for k, sc in enumerate(scenarios):
        chunk = results[k * R:(k + 1) * R]
        for r in chunk:
            e = r.estimates
            rows.append([sc.label, r.rep, r.seed, r.converged,
                         "" if r.covered_population is None else r.covered_population,
                         r.covered_subjects, r.width_population, r.width_subjects, r.min_slope,
                         r.nll, e.get("sigma"), e.get("sigma_b1"), e.get("sigma_b2"),
                         e.get("sigma_b3"), e.get("sigma_omega"), r.error])
        s = sim.summarize(sc, chunk)
        entry = {k: v for k, v in vars(s).items() if not k.startswith("runtime")}
        timings.append({"setting": sc.label, "runtime_median": s.runtime_median,
                        "runtime_quartiles": s.runtime_quartiles,
                        "wall_time": [r.wall_time for r in chunk]})
        if sc.kind == "cubic":
            slopes = [r.min_slope for r in chunk if r.converged]
            entry["lambda_c"] = sc.lambda_c
            entry["min_slope_median"] = float(np.median(slopes)) if slopes else math.nan
        summaries.append(entry)
    write_csv(cfg.out / "replications.csv", REP_HEADER, rows, cfg.meta)
    write_json(cfg.out / "summary.json", {"meta": cfg.meta, "R": R, "settings": summaries})
    write_json(cfg.out / "timing.json", {"meta": cfg.meta, "settings": timings})
    return EXIT_OK


def cmd_bootstrap(cfg: RunConfig) -> int:
    R = cfg.get("bootstrap", "R", 50, int)
    if R < 0:
        raise ConfigError("[bootstrap] R must be nonnegative")
    cfg.out.mkdir(parents=True, exist_ok=True)
    header = ["rep", "converged", "error"]
    if R == 0:
        write_json(cfg.out / "bootstrap.json", {"meta": cfg.meta, "R": 0, "parameters": []})
        write_csv(cfg.out / "bootstrap_replicates.csv", header, [], cfg.meta)
        return EXIT_OK
    spec = fit_spec_from(cfg)
    data = dataset_from(cfg)
    problem = Problem(spec, data)
    fit = outer_optimize(problem, options=cfg.options)
    if not fit.converged:
        print(f"error: original fit did not converge ({fit.message})", file=sys.stderr)
        return EXIT_NOCONV
    report = sim.parametric_bootstrap(
        fit, problem, R, seed=cfg.seed, workers=cfg.workers,
        per_rep_se=cfg.get("bootstrap", "per_rep_se", False, bool), options=cfg.options)
    params = [{"name": r.name, "estimate": r.estimate, "boot_mean": r.boot_mean, "bias": r.bias,
               "boot_sd": r.boot_sd, "se": r.se, "mean_se": r.mean_se, "sd_over_se": r.sd_ratio}
              for r in report.rows]
    write_json(cfg.out / "bootstrap.json", {"meta": cfg.meta, "R": R, "n_failed": report.n_failed,
                                            "parameters": params})
    names = [r.name for r in report.rows]
    rows = []
    for rep in report.replicates:
        vals = rep["values"] if rep["values"] is not None else [math.nan] * len(names)
        rows.append([rep["rep"], rep["converged"], rep["error"], *vals])
    write_csv(cfg.out / "bootstrap_replicates.csv", header + names, rows, cfg.meta)
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    spec = fit_spec_from(cfg)
    data = dataset_from(cfg)
    ppath = Path(cfg.get("predict", "params", ConfigError))
    ppath = ppath if ppath.is_absolute() else cfg.path.parent / ppath
    try:
        saved = json.loads(ppath.read_text(encoding="utf-8"))
        theta = np.asarray(saved["theta_hat"], dtype=float)
        V = np.asarray(saved["cov_theta"], dtype=float)
    except FileNotFoundError:
        raise DataError(f"parameter file not found: {ppath}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{ppath}: not a params.json written by 'snmm fit' ({exc})") from None
    problem = Problem(spec, data)
    L = problem.layout
    if theta.shape != (L.n_theta,) or V.shape != (L.n_theta, L.n_theta):
        raise ConfigError("saved parameters do not match the configured model")
    from .estimator import FitResult, starting_values
    _, psi0 = starting_values(problem)
    try:
        state = inner_solve(problem, theta, psi0)
    except InnerFailure as exc:
        print(f"error: random-effect mode not found: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    fit = FitResult(theta=theta, psi=state.psi, H=state.H, nll=math.nan, grad=np.zeros(0),
                    converged=True, iterations=0, wall_time=0.0, n_evals=1,
                    n_inner_iterations=state.iterations, layout=L)
    cfg.out.mkdir(parents=True, exist_ok=True)
    pcov = inf.prediction_cov(fit, problem, V)
    _write_bands(cfg, fit, problem, pcov, data, prefix="predict")
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig) -> int:
    kind = cfg.get("benchmark", "scenario", "sine")
    ns = cfg.get("benchmark", "n", [10, 20], "ints")
    ms = cfg.get("benchmark", "m", [10, 20], "ints")
    R = cfg.get("benchmark", "R", 3, int)
    if R < 1:
        raise ConfigError("[benchmark] R must be at least 1")
    scenarios = [scenario_from(cfg, "benchmark", kind, n=n, m=m) for n in ns for m in ms]
    rows = sim.benchmark(scenarios, R, options=cfg.options, workers=cfg.workers)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_json(cfg.out / "benchmark.json", {"meta": cfg.meta, "rows": [vars(r) for r in rows]})
    return EXIT_OK


HANDLERS = {"fit": cmd_fit, "simulate": cmd_simulate, "bootstrap": cmd_bootstrap,
            "predict": cmd_predict, "benchmark": cmd_benchmark}


def main(argv: Optional[list[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="snmm", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--seed", type=int, help="overrides [run] seed")
    ap.add_argument("--workers", type=int, help="worker processes for replications")
    ap.add_argument("--out", help="output directory")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.command, args.config, args.seed, args.workers, args.out)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InnerFailure as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
