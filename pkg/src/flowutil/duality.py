"""Dual flows, Darboux brackets for int Y d_z X*, and dual-side checks.

Built-in dual flows are separable: Y(t, x) = Z_t u_x(x) for a positive
process Z with Z_0 = 1, so the pathwise factor and the capital dependence
are stored apart and evaluated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, RangeError, UnsupportedConfigurationError
from .flows import FlowField
from .market import PathEnsemble
from .utility import UtilityField, UtilityFunction, dual_exponent, small_capital_integral
from .verifier import ROUNDOFF, CaseResult, DriftTestSpec, TestClassSampler, TestReport, conditional_drift_test, paired_comparison

DUAL_KINDS = ("constant", "modulated", "drifted", "deflator")


@dataclass(eq=False)
class DualFlow:
    """Y(t, x) = modulation[path, t] * u_x(x).

    ``modulation`` is (P, n_steps+1) on the ensemble grid. ``channel`` names
    the ensemble martingale used for it, if any.
    """

    x_grid: np.ndarray
    kind: str
    utility: UtilityFunction
    modulation: np.ndarray
    channel: str | None = None
    drift: float = 0.0

    @property
    def tag(self) -> str:
        if self.kind == "modulated":
            return f"modulated[{self.channel}]"
        if self.kind == "drifted":
            return f"drifted[{self.drift:g}]"
        return self.kind

    @property
    def initial_marginal(self):
        return self.utility.marginal

    @property
    def values(self) -> np.ndarray:
        """Materialized (P, n_steps+1, n_nodes) grid values."""
        return self.modulation[:, :, None] * self.utility.marginal(self.x_grid)

    def evaluate(self, paths, time_index, x):
        """Y at ensemble time index ``time_index`` and capital ``x``."""
        return self.modulation[paths, time_index] * self.utility.marginal(x)

    def inverse(self, paths, time_index, y):
        """Capital x with Y(t, x) = y."""
        return self.utility.inverse_marginal(np.asarray(y) / self.modulation[paths, time_index])


def build_dual_flow(
    kind: str,
    u: UtilityFunction,
    ensemble: PathEnsemble,
    x_grid,
    aux_index: int = 0,
    drift: float = 0.1,
    flow: FlowField | None = None,
) -> DualFlow:
    """Dual flow of the given kind on the ensemble.

    ``modulated`` uses auxiliary martingale ``aux_index`` (driven by a channel
    disjoint from the assets); ``drifted`` multiplies by e^{drift t} and is
    not a valid dual (negative control); ``deflator`` uses M.
    """
    grid = np.asarray(x_grid, dtype=float)
    channel = None
    if kind == "constant":
        mod = np.ones_like(ensemble.deflator_paths)
    elif kind == "modulated":
        if ensemble.aux_martingales.shape[0] <= aux_index:
            raise ConfigurationError(
                f"modulated dual needs auxiliary martingale {aux_index}; ensemble has {ensemble.aux_martingales.shape[0]}",
                module="duality",
            )
        channel = f"aux:{aux_index}"
        mod = ensemble.aux_martingales[aux_index]
    elif kind == "drifted":
        mod = np.broadcast_to(np.exp(drift * ensemble.times), ensemble.deflator_paths.shape).copy()
    elif kind == "deflator":
        channel = "deflator"
        mod = ensemble.deflator_paths
    else:
        raise ConfigurationError(f"unknown dual kind {kind!r}; expected one of {DUAL_KINDS}", module="duality")
    if flow is not None and channel is not None and channel in flow.sources:
        raise ConfigurationError(f"dual modulation {channel} is not independent of the flow drivers", module="duality")
    return DualFlow(grid, kind, u, mod, channel, drift if kind == "drifted" else 0.0)


def _asymptote(flow: FlowField, dual: DualFlow, rows, zfac):
    ly = flow.table.y[rows]
    a = (ly[:, 1] - ly[:, 0]) / (flow.table.x[1] - flow.table.x[0])
    if np.any(a <= dual_exponent(dual.utility)):
        raise RangeError("flow/dual pair not integrable below the grid")
    return small_capital_integral(dual.utility, zfac, np.exp(ly[:, 0]), a, flow.x_min, flow.x_min)


def darboux_bracket(flow: FlowField, dual: DualFlow, x: float, N: int, path, t: float):
    """Left and right Riemann-Stieltjes sums (S_N, S'_N) of int_0^x Y(t, z) d_z X*_t(z).

    [x_min, x] is split into N geometric cells; the piece on (0, x_min] is
    the shared power-law asymptote. S_N evaluates Y at left ends, S'_N at
    right ends, so S'_N <= S_N.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    if not flow.x_min < x <= flow.x_max:
        raise RangeError(f"capital {x} outside ({flow.x_min:g}, {flow.x_max:g}]", (flow.x_min, flow.x_max))
    tpos = flow.time_position(t)
    ti = int(flow.time_index[tpos])
    paths = np.atleast_1d(np.asarray(path, dtype=np.intp))
    z = np.geomspace(flow.x_min, x, N + 1)
    rows = flow.rows(paths, tpos)
    zfac = dual.modulation[paths, ti]
    base = _asymptote(flow, dual, rows, zfac)
    left = np.zeros(paths.size)
    right = np.zeros(paths.size)
    lz = np.log(z)
    chunk = max(1, 2_000_000 // (N + 1))
    ux = dual.utility.marginal(z)
    for start in range(0, paths.size, chunk):
        sl = slice(start, start + chunk)
        xs = np.exp(flow.table.value(rows[sl, None], lz[None, :]))
        dx = np.diff(xs, axis=1)
        left[sl] = dx @ ux[:-1]
        right[sl] = dx @ ux[1:]
    left = base + zfac * left
    right = base + zfac * right
    if np.ndim(path) == 0:
        return float(left[0]), float(right[0])
    return left, right


def dual_suite(
    flow: FlowField,
    dual: DualFlow,
    field_: UtilityField,
    sampler: TestClassSampler,
    ensemble: PathEnsemble,
    spec: DriftTestSpec | None = None,
    etas=(0.5, 1.0, 2.0),
    start: int = 0,
    deltas=(0.05, 0.1),
    market: str = "martingale",
) -> TestReport:
    """Dual-side checks for s-attainable levels kappa = U_x(s, eta).

    The optimal dual Y*_t = Y(t, cal-X(s, eta)). Candidates Y* e^{-delta (t-s)}
    stay in the dual class (their products with test wealths are
    supermartingales). Checks: (a) E[U~(t, Y_t)] >= U~(s, kappa) for every
    candidate, strictly for the perturbed ones; (b) equality for Y*;
    (c) U~(t, Y*_t) is a martingale; membership of Y* (Y* X supermartingale).
    """
    if not sampler.homogeneous:
        raise UnsupportedConfigurationError("the dual problem needs the homogeneous (cone) test class")
    nt = field_.n_times
    if start >= nt - 1:
        raise ConfigurationError("dual suite needs at least one time after the start", module="duality")
    spec = spec or DriftTestSpec.default_pairs(nt - start)
    tidx = flow.time_index
    later = np.arange(start, nt)
    times = flow.times[later]
    p = ensemble.n_paths
    paths = np.arange(p)
    report = TestReport(
        suite="dual_suite",
        seed=ensemble.seed,
        scenario_hash=ensemble.scenario.scenario_hash(),
        n_paths=p,
        meta={"start_time": float(flow.times[start]), "dual": dual.tag, "attainable_only": True},
    )
    rows_l = field_.rows(paths[:, None], later[None, :])

    for eta in etas:
        eta_s = np.full(p, float(eta))
        kappa = field_.marginal(paths, start, eta_s)
        w = flow.inverse(paths, start, eta_s)
        y_star = dual.evaluate(paths[:, None], tidx[later][None, :], w[:, None])
        conj_star = _conjugate(field_, rows_l, y_star)
        conj_s = conj_star[:, 0]
        label = f"eta={eta:g}"
        # (b) equality of the optimal dual at each later time, paired against the start value
        for j in range(1, later.size):
            report.cases.append(_equality(f"equality[{label},t={times[j]:g}]", conj_s, conj_star[:, j], spec.k))
        # (c) martingale drift of U~(t, Y*_t)
        report.extend(conditional_drift_test(conj_star, spec.with_direction("martingale"), f"Ustar(Y*)[{label}]", state=y_star))
        # (a) perturbed candidates: submartingale direction and strict gain over Y*
        for delta in deltas:
            cand = y_star * np.exp(-delta * (times - times[0]))[None, :]
            conj_c = _conjugate(field_, rows_l, cand)
            report.extend(
                conditional_drift_test(
                    conj_c, spec.with_direction("submartingale"), f"Ustar(Y)[{label},delta={delta:g}]", state=cand
                )
            )
            report.cases.append(
                paired_comparison(f"strict[{label},delta={delta:g}]", conj_star[:, -1], conj_c[:, -1], spec.k, strict=True)
            )
        # membership: Y* X is a supermartingale for the sampled test wealths
        for name, wealth in sampler.wealths(ensemble, float(eta)):
            xt = wealth.values[:, tidx[later]]
            if market == "martingale":
                xt = xt * ensemble.deflator_paths[:, tidx[later]]
            report.extend(
                conditional_drift_test(
                    y_star * xt, spec.with_direction("supermartingale"), f"Y*X[{label},{name}]", state=xt
                )
            )
        report.meta[f"kappa_range[{label}]"] = [float(kappa.min()), float(kappa.max())]
    return report


def _conjugate(field_: UtilityField, rows, y):
    return field_.conjugate_rows(rows, y).reshape(np.shape(y))


def _equality(name, start_vals, end_vals, k):
    d = end_vals - start_vals
    stat = float(np.mean(d))
    se = float(np.std(d, ddof=1) / np.sqrt(d.size))
    ok = abs(stat) <= k * se + ROUNDOFF * float(np.mean(np.abs(start_vals) + np.abs(end_vals)))
    return CaseResult(name, stat, se, "martingale", "pass" if ok else "fail")
