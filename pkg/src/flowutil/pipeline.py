"""Experiment orchestration: simulate, build flow, dual and field, run suites."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, parse_list
from .container import cached_ensemble
from .duality import DualFlow, build_dual_flow, darboux_bracket, dual_suite
from .errors import ConfigurationError, RangeError
from .flows import FlowField, FlowGeneratorSpec, build_flow_field, default_grid
from .market import PathEnsemble, simulate_drivers
from .utility import (
    UtilityField,
    build_utility_field,
    conjugate_via_flow,
    fenchel_conjugate,
    initial_market_field,
    initial_utility,
    numeraire_transform,
)
from .verifier import (
    CaseResult,
    DriftTestSpec,
    TestClassSampler,
    TestReport,
    consistency_suite,
    oc_check,
    shape_audit,
)

logger = logging.getLogger(__name__)

# module name -> config section that feeds it, for error messages
CONFIG_LOCUS = {
    "market_model": "[scenario]",
    "flow_engine": "[flow]",
    "utility_lab": "[construction]",
    "duality": "[dual]",
    "verifier": "[suites]",
    "cli_reporting": "[output]",
}


@dataclass(eq=False)
class Experiment:
    config: ExperimentConfig
    ensemble: PathEnsemble
    flow: FlowField
    dual: DualFlow
    field: UtilityField
    numeraire: np.ndarray | None = None
    transformed: UtilityField | None = None

    @property
    def market(self) -> str:
        return self.config.construction.market

    def sampler(self, n_strategies: int = 8) -> TestClassSampler:
        return TestClassSampler(self.ensemble.scenario.constraint_set, n_strategies, seed=self.config.seed)


def simulate(config: ExperimentConfig) -> PathEnsemble:
    return cached_ensemble(config.scenario, config.paths, config.seed, simulate_drivers)


def prepare(config: ExperimentConfig, ensemble: PathEnsemble | None = None) -> Experiment:
    ens = ensemble if ensemble is not None else simulate(config)
    fs = config.flow
    grid = default_grid(fs.x_min, fs.x_max, fs.n_nodes)
    times = np.arange(0, config.scenario.n_steps + 1, fs.time_stride)
    flow = build_flow_field(FlowGeneratorSpec(fs.generator, fs.sources), grid, ens, times)
    u = initial_utility(config.dual.family, config.dual.utility_params())
    if config.construction.market == "initial":
        field_ = initial_market_field(ens.deflator_paths, flow, u)
        dual = field_.dual
    else:
        ds = config.dual
        dual = build_dual_flow(ds.kind, u, ens, grid, aux_index=ds.aux_index, drift=ds.drift, flow=flow)
        field_ = build_utility_field(flow, dual)
    exp = Experiment(config, ens, flow, dual, field_)
    if config.construction.numeraire != "none":
        y = ens.martingale(config.construction.numeraire)[:, flow.time_index]
        exp.numeraire = y
        exp.transformed = numeraire_transform(field_, y)
    return exp


def _opt(options: dict, key: str, default, conv=float):
    if key not in options:
        return default
    raw = options[key]
    if isinstance(default, tuple):
        return parse_list(raw, conv)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigurationError(f"suite option {key} = {raw!r}: {exc}") from exc


def _spec(options: dict, n_times: int, start: int = 0) -> DriftTestSpec:
    features = _opt(options, "features", ("const", "bins4", "deflator"), str)
    return DriftTestSpec.default_pairs(n_times, start=start, features=features, k=_opt(options, "k", 3.0))


def run_consistency(exp: Experiment, options: dict) -> TestReport:
    field_ = exp.transformed if exp.transformed is not None else exp.field
    nt = field_.n_times
    return consistency_suite(
        field_,
        exp.sampler(_opt(options, "n_strategies", 8, int)),
        exp.flow,
        exp.ensemble,
        spec=_spec(options, nt),
        x0s=_opt(options, "x0s", (0.5, 1.0, 2.0)),
        market=exp.market,
        numeraire=exp.numeraire,
        start=_opt(options, "start", nt // 2, int),
        branches=_opt(options, "branches", ("test-class", "optimum", "intermediate", "dominance"), str),
    )


def run_oc_check(exp: Experiment, options: dict) -> TestReport:
    sampler = exp.sampler(_opt(options, "n_strategies", 8, int))
    branches = ("difference", "optimum", "test") if sampler.homogeneous else ("difference",)
    return oc_check(
        exp.flow,
        exp.dual,
        sampler,
        exp.ensemble,
        spec=_spec(options, exp.flow.n_times),
        xs=_opt(options, "xs", (0.5, 1.0, 2.0)),
        x_primes=_opt(options, "x_primes", (0.5, 1.0, 2.0)),
        direction=_opt(options, "direction", "supermartingale", str),
        market=exp.market,
        branches=branches,
    )


def run_shape_audit(exp: Experiment, options: dict) -> TestReport:
    report = shape_audit(exp.field, inada_ratio=_opt(options, "inada_ratio", 10.0))
    report.seed = exp.ensemble.seed
    report.scenario_hash = exp.ensemble.scenario.scenario_hash()
    return report


def run_dual_suite(exp: Experiment, options: dict) -> TestReport:
    start = _opt(options, "start", 0, int)
    return dual_suite(
        exp.flow,
        exp.dual,
        exp.field,
        exp.sampler(_opt(options, "n_strategies", 8, int)),
        exp.ensemble,
        spec=_spec({k: v for k, v in options.items() if k != "features"}, exp.field.n_times - start),
        etas=_opt(options, "etas", (0.5, 1.0, 2.0)),
        start=start,
        deltas=_opt(options, "deltas", (0.05, 0.1)),
        market=exp.market,
    )


def run_darboux(exp: Experiment, options: dict) -> TestReport:
    """Bracket ordering, monotone gap refinement, and the martingale mean at the horizon."""
    x = _opt(options, "x", 1.0)
    ns = _opt(options, "ns", (16, 64, 256, 1024), int)
    k = _opt(options, "k", 3.0)
    flow, dual, field_ = exp.flow, exp.dual, exp.field
    paths = np.arange(exp.ensemble.n_paths)
    t_end = float(flow.times[-1])
    report = _blank("darboux", exp)
    gaps = []
    for n in ns:
        ordered = True
        for t in flow.times[1:]:
            s_left, s_right = darboux_bracket(flow, dual, x, n, paths, float(t))
            ordered &= bool(np.all(s_right <= s_left))
        gap = s_left - s_right  # at the horizon
        gaps.append(gap)
        report.cases.append(CaseResult(f"ordering[N={n}]", float(np.max(s_right - s_left)), 0.0, "deterministic", "pass" if ordered else "fail"))
    shrink = all(np.all(gaps[i + 1] < gaps[i]) for i in range(len(gaps) - 1))
    report.cases.append(
        CaseResult("gap-decreasing", float(np.mean(gaps[-1])), 0.0, "deterministic", "pass" if shrink else "fail")
    )
    # the built field must sit inside the finest bracket
    tpos = flow.n_times - 1
    u_field = field_.evaluate(paths, tpos, flow.evaluate(paths, tpos, x))
    inside = np.all((u_field >= s_right - 1e-9 * np.abs(u_field)) & (u_field <= s_left + 1e-9 * np.abs(u_field)))
    report.cases.append(
        CaseResult("field-within-bracket", float(np.max(np.abs(u_field - 0.5 * (s_left + s_right)))), 0.0, "deterministic", "pass" if inside else "fail")
    )
    target = float(dual.utility.value(x))
    mean = float(np.mean(s_left))
    se = float(np.std(s_left, ddof=1) / np.sqrt(s_left.size))
    bound = k * se + float(np.mean(gaps[-1]))
    report.cases.append(
        CaseResult(f"martingale-mean[T={t_end:g},N={ns[-1]}]", mean - target, se, "martingale", "pass" if abs(mean - target) <= bound else "fail")
    )
    report.meta.update({"x": x, "ns": list(ns), "refinement_bound": float(np.mean(gaps[-1])), "target": target})
    return report


def run_conjugate(exp: Experiment, options: dict) -> TestReport:
    """Cross-route agreement of the two conjugates and the Fenchel-Young inequality on a lattice."""
    n_paths = min(_opt(options, "n_paths", 4, int), exp.ensemble.n_paths)
    n_t = _opt(options, "n_t", 5, int)
    n_y = _opt(options, "n_y", 20, int)
    tol = _opt(options, "tol", 1e-4)
    flow, dual, field_ = exp.flow, exp.dual, exp.field
    report = _blank("conjugate", exp)
    tpos_all = np.unique(np.linspace(0, flow.n_times - 1, min(n_t, flow.n_times)).round().astype(int))
    worst_cross = worst_route = worst_fy = 0.0
    fy_ok = True
    for p in range(n_paths):
        for tp in tpos_all:
            t = float(flow.times[tp])
            ys = conjugate_lattice(field_, dual, flow, p, tp, n_y)
            grid = fenchel_conjugate(field_, t, ys, p)
            legendre = fenchel_conjugate(field_, t, ys, p, route="legendre")
            via = conjugate_via_flow(flow, dual, t, ys, p)
            worst_cross = max(worst_cross, float(np.max(np.abs(grid - via) / np.abs(via))))
            worst_route = max(worst_route, float(np.max(np.abs(grid - legendre))))
            u = field_.U_values[p, tp]
            ok = np.isfinite(u)
            xs = field_.x_grid[ok]
            gap = via[:, None] + np.outer(ys, xs) - u[ok][None, :]
            fy_ok &= bool(np.all(gap >= -1e-9 * np.abs(u[ok]).max()))
            worst_fy = min(worst_fy, float(gap.min()))
    report.cases.append(CaseResult("cross-route", worst_cross, 0.0, "deterministic", "pass" if worst_cross <= tol else "fail"))
    report.cases.append(CaseResult("grid-vs-legendre", worst_route, 0.0, "deterministic", "pass" if worst_route <= 1e-6 else "fail"))
    report.cases.append(CaseResult("fenchel-young", worst_fy, 0.0, "deterministic", "pass" if fy_ok else "fail"))
    report.meta.update({"tolerance": tol, "n_paths": n_paths, "times": [float(flow.times[i]) for i in tpos_all]})
    return report


def conjugate_lattice(field_: UtilityField, dual: DualFlow, flow: FlowField, path: int, tpos: int, n_y: int):
    """Log-spaced dual levels inside both conjugate domains (field grid and dual grid), shrunk by 1%."""
    ux = field_.Ux_values[path, tpos]
    ux = ux[np.isfinite(ux)]
    ti = int(flow.time_index[tpos])
    lo = max(float(ux[-1]), float(dual.evaluate(path, ti, flow.x_max)))
    hi = min(float(ux[0]), float(dual.evaluate(path, ti, flow.x_min)))
    if not lo < hi:
        raise RangeError(f"empty conjugate domain on path {path}, time position {tpos}")
    return np.geomspace(lo * 1.01, hi * 0.99, n_y)


def _blank(suite: str, exp: Experiment) -> TestReport:
    return TestReport(
        suite=suite,
        seed=exp.ensemble.seed,
        scenario_hash=exp.ensemble.scenario.scenario_hash(),
        n_paths=exp.ensemble.n_paths,
    )


SUITES = {
    "consistency": run_consistency,
    "oc_check": run_oc_check,
    "shape_audit": run_shape_audit,
    "dual_suite": run_dual_suite,
    "darboux": run_darboux,
    "conjugate": run_conjugate,
}


def run_suites(exp: Experiment, names) -> list[TestReport]:
    reports = []
    for name in names:
        logger.info("running suite %s", name)
        report = SUITES[name](exp, exp.config.suite_options(name))
        report.meta.setdefault("config_hash", exp.config.config_hash)
        reports.append(report)
    return reports
