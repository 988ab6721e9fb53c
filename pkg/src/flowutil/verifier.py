"""Statistical certification of martingale and supermartingale drift properties.

Conditional statements E[V_t | F_s] (<=, =, >=) V_s are tested through the
moment conditions E[f_s (V_t - V_s)] for nonnegative F_s-measurable features
f_s. A nonnegative feature keeps the direction of an inequality, so a
supermartingale must give a statistic <= k SE for every feature.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConstraintViolationError,
    SpecError,
    UnsupportedConfigurationError,
)
from .market import ConstraintSet, PathEnsemble, Strategy, wealth_from_strategy

DIRECTIONS = ("martingale", "supermartingale", "submartingale")
BUILTIN_FEATURES = ("const", "bins4", "deflator")


@dataclass(frozen=True)
class DriftTestSpec:
    """Which (s, t) position pairs, features and direction to test.

    ``pairs`` index the time axis of the process handed to the test.
    Features: ``const`` (always included), ``bins4`` (rank-quartile
    indicators of the state at s), ``deflator`` (M_s, when supplied).
    """

    pairs: tuple[tuple[int, int], ...]
    features: tuple[str, ...] = BUILTIN_FEATURES
    direction: str = "martingale"
    k: float = 3.0
    min_paths: int = 1000
    heavy_tail_share: float = 0.1

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise SpecError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not self.pairs:
            raise SpecError("drift test needs at least one (s, t) pair")
        if any(s >= t or s < 0 for s, t in self.pairs):
            raise SpecError("test pairs must satisfy 0 <= s < t")
        if "const" not in self.features:
            object.__setattr__(self, "features", ("const",) + tuple(self.features))
        if not self.k > 0:
            raise SpecError("confidence multiplier must be positive")

    @classmethod
    def default_pairs(cls, n_times: int, start: int = 0, **kwargs) -> "DriftTestSpec":
        """Consecutive pairs from ``start`` plus the (start, last) pair."""
        pairs = [(i, i + 1) for i in range(start, n_times - 1)]
        if n_times - 1 - start > 1:
            pairs.append((start, n_times - 1))
        if not pairs:
            raise SpecError("need at least two time positions for a drift test")
        return cls(pairs=tuple(pairs), **kwargs)

    def with_direction(self, direction: str) -> "DriftTestSpec":
        return DriftTestSpec(self.pairs, self.features, direction, self.k, self.min_paths, self.heavy_tail_share)

    def restricted_to(self, start: int) -> "DriftTestSpec":
        """Pairs starting at or after position ``start`` (plus (start, t) pairs)."""
        pairs = sorted({p for p in self.pairs if p[0] >= start} | {(start, t) for _, t in self.pairs if t > start})
        return DriftTestSpec(tuple(pairs), self.features, self.direction, self.k, self.min_paths, self.heavy_tail_share)


@dataclass
class CaseResult:
    name: str
    statistic: float
    stderr: float
    direction: str
    verdict: str
    warning: str | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


@dataclass
class TestReport:
    """Verdicts of one suite. ``meta`` carries settings and flagged caveats."""

    __test__ = False  # not a pytest class

    suite: str
    cases: list[CaseResult] = field(default_factory=list)
    seed: int | None = None
    scenario_hash: str | None = None
    n_paths: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def failures(self) -> list[CaseResult]:
        return [c for c in self.cases if not c.passed]

    def extend(self, other: "TestReport", prefix: str = "") -> "TestReport":
        for c in other.cases:
            self.cases.append(CaseResult(prefix + c.name, c.statistic, c.stderr, c.direction, c.verdict, c.warning))
        self.n_paths = max(self.n_paths, other.n_paths)
        return self

    def to_dict(self) -> dict:
        cases = []
        for c in self.cases:
            d = asdict(c)
            if d["warning"] is None:
                del d["warning"]
            cases.append(d)
        return {
            "suite": self.suite,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "cases": cases,
            "verdict": self.verdict,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, data: dict) -> "TestReport":
        cases = [CaseResult(**c) for c in data.get("cases", [])]
        return cls(data["suite"], cases, data.get("seed"), data.get("scenario_hash"), data.get("n_paths", 0), data.get("meta", {}))

    def csv_rows(self) -> list[dict]:
        return [
            {
                "suite": self.suite,
                "scenario_hash": self.scenario_hash,
                "seed": self.seed,
                "name": c.name,
                "statistic": repr(float(c.statistic)),
                "stderr": repr(float(c.stderr)),
                "direction": c.direction,
                "verdict": c.verdict,
                "warning": c.warning or "",
            }
            for c in self.cases
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.csv_rows())
        return buf.getvalue()

    def summary(self) -> str:
        bad = self.failures()
        head = f"{self.suite}: {self.verdict} ({len(self.cases) - len(bad)}/{len(self.cases)} cases)"
        return head + "".join(f"\n  FAIL {c.name}: stat={c.statistic:.4g} se={c.stderr:.3g}" for c in bad[:10])


CSV_FIELDS = ["suite", "scenario_hash", "seed", "name", "statistic", "stderr", "direction", "verdict", "warning"]


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# relative floor below which a statistic is treated as floating-point noise
ROUNDOFF = 1e-12


def judge(stat: float, se: float, direction: str, k: float = 3.0, atol: float = 0.0) -> str:
    """Verdict of a moment statistic against zero at k standard errors (plus ``atol``)."""
    if not (math.isfinite(stat) and math.isfinite(se)):
        return "fail"
    bound = k * se + atol
    if direction == "supermartingale":
        ok = stat <= bound
    elif direction == "submartingale":
        ok = stat >= -bound
    elif direction == "martingale":
        ok = abs(stat) <= bound
    else:
        raise SpecError(f"unknown direction {direction!r}")
    return "pass" if ok else "fail"


def _features(spec: DriftTestSpec, state_s: np.ndarray, deflator_s, extra_s: dict):
    out = []
    for name in spec.features:
        if name == "const":
            out.append(("const", np.ones(state_s.size)))
        elif name == "bins4":
            if np.ptp(state_s) == 0:
                continue  # deterministic state at s: bins carry no information
            rank = np.empty(state_s.size, dtype=np.intp)
            rank[np.argsort(state_s, kind="stable")] = np.arange(state_s.size)
            b = rank * 4 // state_s.size
            out.extend((f"bin{j}", (b == j).astype(float)) for j in range(4))
        elif name == "deflator":
            if deflator_s is not None:
                out.append(("deflator", deflator_s))
        elif name in extra_s:
            out.append((name, extra_s[name]))
        else:
            raise SpecError(f"feature {name!r} is neither built in nor supplied")
    for name, f in out:
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise SpecError(f"feature {name!r} must be finite and nonnegative (keeps inequality direction)")
        if not np.any(f > 0):
            raise SpecError(f"feature {name!r} is identically zero")
    return out


def conditional_drift_test(
    values,
    spec: DriftTestSpec,
    name: str = "V",
    state=None,
    deflator=None,
    features: dict | None = None,
    suite: str = "drift",
    scale=None,
) -> TestReport:
    """Moment-condition drift test of a (paths, times) process.

    ``state`` (same shape) supplies the conditioning value for bin features
    (default: the process itself). ``deflator`` and ``features`` entries are
    (paths, times) arrays evaluated at s. ``scale`` (same shape, default
    |values|) sets the magnitude for the roundoff floor; pass it when the
    process is a difference of much larger terms.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise SpecError("drift test expects a (paths, times) array")
    n = v.shape[0]
    if n < spec.min_paths:
        raise SpecError(f"drift test needs at least {spec.min_paths} paths, got {n}")
    if spec.pairs and max(t for _, t in spec.pairs) >= v.shape[1]:
        raise SpecError("test pair outside the process's time axis")
    st = v if state is None else np.asarray(state, dtype=float)
    mag = np.abs(v) if scale is None else np.abs(np.asarray(scale, dtype=float))
    extra = features or {}
    report = TestReport(suite=suite, n_paths=n, meta={"k": spec.k})
    sqrt_n = math.sqrt(n)
    for s, t in spec.pairs:
        inc = v[:, t] - v[:, s]
        defl = None if deflator is None else np.asarray(deflator)[:, s]
        for fname, f in _features(spec, st[:, s], defl, {k: np.asarray(a)[:, s] for k, a in extra.items()}):
            term = f * inc
            stat = float(np.mean(term))
            dev = term - stat
            ss = float(np.dot(dev, dev))
            se = math.sqrt(ss / (n - 1)) / sqrt_n
            warning = None
            if ss > 0:
                share = float(np.max(dev * dev)) / ss
                if share > spec.heavy_tail_share:
                    warning = f"heavy tail: one path carries {share:.0%} of the variance"
            atol = ROUNDOFF * float(np.mean(f * (mag[:, t] + mag[:, s])))
            verdict = judge(stat, se, spec.direction, spec.k, atol)
            report.cases.append(CaseResult(f"{name}[{s}->{t}]:{fname}", stat, se, spec.direction, verdict, warning))
    return report


def paired_comparison(name, low, high, k=3.0, strict=False) -> CaseResult:
    """Is mean(low) <= mean(high) within k SE (paired)? ``strict`` demands a margin above k SE."""
    high = np.asarray(high, dtype=float)
    low = np.asarray(low, dtype=float)
    d = high - low
    stat = float(np.mean(d))
    se = float(np.std(d, ddof=1) / math.sqrt(d.size))
    atol = ROUNDOFF * float(np.mean(np.abs(high) + np.abs(low)))
    if strict:
        verdict = "pass" if stat > k * se + atol else "fail"
        direction = "strict-dominance"
    else:
        verdict = "pass" if stat >= -(k * se + atol) else "fail"
        direction = "dominance"
    return CaseResult(name, stat, se, direction, verdict)


class TestClassSampler:
    """Draws proportion strategies from a convex constraint set.

    The draw mixes constant proportions (including the boundary corner
    ``upper``), piecewise-constant schedules and convex combinations of
    earlier draws, so the convexity of the test class is exercised.
    """

    __test__ = False

    def __init__(self, constraint_set: ConstraintSet, n_strategies: int = 8, seed: int = 0, include: tuple = ()):
        self.constraint_set = constraint_set
        self.n_strategies = n_strategies
        self.seed = seed
        self.include = tuple(include)

    @property
    def homogeneous(self) -> bool:
        return self.constraint_set.homogeneous

    def _box(self):
        lo = np.asarray(self.constraint_set.lower, dtype=float)
        hi = np.asarray(self.constraint_set.upper, dtype=float)
        return lo, np.where(np.isfinite(hi), hi, lo + 2.0)

    def strategies(self, times: np.ndarray) -> list[tuple[str, Strategy]]:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(7,)))
        lo, hi = self._box()
        horizon = float(times[-1])
        out: list[tuple[str, Strategy]] = [(f"given{i}", s) for i, s in enumerate(self.include)]
        out.append(("const-upper", Strategy.constant(hi)))
        while len(out) < self.n_strategies:
            j = len(out) % 3
            if j == 0:
                pi = lo + rng.uniform(size=lo.size) * (hi - lo)
                out.append((f"const{len(out)}", Strategy.constant(pi)))
            elif j == 1:
                n_pieces = int(rng.integers(2, 4))
                br = np.sort(rng.uniform(0.1, 0.9, size=n_pieces - 1)) * horizon
                vals = lo + rng.uniform(size=(n_pieces, lo.size)) * (hi - lo)
                out.append((f"piecewise{len(out)}", Strategy.piecewise(br, vals)))
            else:
                a, b = rng.choice(len(out), size=2, replace=len(out) < 2)
                w = float(rng.uniform(0.2, 0.8))
                out.append((f"mix{len(out)}", out[a][1].mixed_with(out[b][1], w, times)))
        for name, s in out:
            if not np.all(self.constraint_set.contains(s.on_grid(times))):
                raise ConstraintViolationError(f"sampler produced out-of-class strategy {name}")
        return out[: self.n_strategies]

    def wealths(self, ensemble: PathEnsemble, x0: float):
        """(name, WealthPaths) for every sampled strategy started at ``x0``."""
        return [
            (name, wealth_from_strategy(ensemble, s, x0, self.constraint_set))
            for name, s in self.strategies(ensemble.times)
        ]


def _market_wealth(wealth, ensemble, tidx, market, numeraire):
    x = wealth.values[:, tidx]
    if market == "martingale":
        x = x * ensemble.deflator_paths[:, tidx]
    if numeraire is not None:
        x = x / numeraire
    return x


def _field_numeraire(numeraire, field_):
    if numeraire is None:
        return None
    y = np.asarray(numeraire, dtype=float)
    return y if y.shape[1] == field_.n_times else y[:, field_.time_index]


def consistency_suite(
    field_,
    sampler: TestClassSampler,
    flow,
    ensemble: PathEnsemble,
    spec: DriftTestSpec | None = None,
    x0s=(0.5, 1.0, 2.0),
    market: str = "martingale",
    numeraire=None,
    start: int | None = None,
    branches=("test-class", "optimum", "intermediate", "dominance"),
) -> TestReport:
    """Consistency of a utility field with the test class.

    Test wealths are deflated by the state-price density in the martingale
    market. With ``numeraire`` Y the field is taken to be V(t, x) = U(t, x Y_t)
    and every wealth (test and optimal) is divided by Y; the bin features still
    use the undivided wealth, so both pairings share the same moment conditions.
    """
    if market not in ("martingale", "initial"):
        raise SpecError(f"market must be 'martingale' or 'initial', got {market!r}")
    tidx = field_.time_index
    nt = field_.n_times
    if not np.array_equal(flow.time_index, tidx):
        raise SpecError("field and flow must share the same time grid")
    spec = spec or DriftTestSpec.default_pairs(nt)
    y = _field_numeraire(numeraire, field_)
    paths = np.arange(ensemble.n_paths)[:, None]
    tpos = np.arange(nt)[None, :]
    defl = ensemble.deflator_paths[:, tidx]
    report = TestReport(
        suite="consistency",
        seed=ensemble.seed,
        scenario_hash=ensemble.scenario.scenario_hash(),
        n_paths=ensemble.n_paths,
        meta={"market": market, "numeraire": numeraire is not None, "k": spec.k},
    )
    sup = spec.with_direction("supermartingale")
    mart = spec.with_direction("martingale")
    sp = nt // 2 if start is None else start

    def optimum(x):
        xs = flow.evaluate(paths, tpos, x)
        return xs if y is None else xs / y

    def state(w, cols=slice(None)):
        # bin on wealth in the original units so the moment conditions do not depend on Y
        return w if y is None else w * y[:, cols]

    for x0 in x0s:
        tests = sampler.wealths(ensemble, x0)
        xs = optimum(x0)
        u_star = field_.evaluate(paths, tpos, xs)
        if "test-class" in branches:
            for name, w in tests:
                xt = _market_wealth(w, ensemble, tidx, market, y)
                vals = field_.evaluate(paths, tpos, xt)
                report.extend(conditional_drift_test(vals, sup, f"U(X)[{name},x={x0:g}]", state=state(xt), deflator=defl))
        if "optimum" in branches:
            report.extend(conditional_drift_test(u_star, mart, f"U(X*)[x={x0:g}]", state=state(xs), deflator=defl))
        if ("intermediate" in branches or "dominance" in branches) and 0 < sp < nt - 1:
            # start at s from an s-attainable capital: the value of a test wealth at s
            eta_src = _market_wealth(tests[0][1], ensemble, tidx, market, y)
            eta = eta_src[:, sp : sp + 1]
            raw_eta = eta if y is None else eta * y[:, sp : sp + 1]
            w0 = flow.inverse(paths, sp, raw_eta)
            later = tpos[:, sp:]
            xs_s = flow.evaluate(paths, later, w0)
            if y is not None:
                xs_s = xs_s / y[:, sp:]
            u_s = field_.evaluate(paths, later, xs_s)
            if "intermediate" in branches:
                sub = DriftTestSpec.default_pairs(nt - sp, features=spec.features, direction="martingale", k=spec.k, min_paths=spec.min_paths)
                report.extend(
                    conditional_drift_test(
                        u_s,
                        sub,
                        f"U(X*(s,eta))[s={field_.times[sp]:g},x={x0:g}]",
                        state=state(xs_s, slice(sp, None)),
                        deflator=defl[:, sp:],
                    )
                )
            if "dominance" in branches:
                for name, w in tests:
                    xt = _market_wealth(w, ensemble, tidx, market, y)
                    restarted = eta * xt[:, -1:] / xt[:, sp : sp + 1]
                    u_test = field_.evaluate(paths[:, 0], nt - 1, restarted[:, 0])
                    report.cases.append(
                        paired_comparison(f"dominance[{name},x={x0:g}]", u_test, u_s[:, -1], spec.k)
                    )
    return report


def oc_check(
    flow,
    dual,
    sampler: TestClassSampler,
    ensemble: PathEnsemble,
    spec: DriftTestSpec | None = None,
    xs=(0.5, 1.0, 2.0),
    x_primes=(0.5, 1.0, 2.0),
    direction: str = "supermartingale",
    market: str = "martingale",
    branches=("difference", "optimum", "test"),
) -> TestReport:
    """Optimality conditions for a (flow, dual) pair.

    ``difference``: (X_t(x') - X*_t(x)) Y(t, x) in ``direction`` for every
    sampled test wealth. ``optimum``: X*_t(x) Y(t, x) is a martingale.
    ``test``: X_t(x') Y(t, x) is a supermartingale. The last two need the
    homogeneous (cone) class.
    """
    if ("optimum" in branches or "test" in branches) and not sampler.homogeneous:
        raise UnsupportedConfigurationError(
            "optimum/test branches of the optimality check need the homogeneous (cone) test class"
        )
    tidx = flow.time_index
    nt = flow.n_times
    spec = spec or DriftTestSpec.default_pairs(nt)
    paths = np.arange(ensemble.n_paths)[:, None]
    tpos = np.arange(nt)[None, :]
    defl = ensemble.deflator_paths[:, tidx]
    report = TestReport(
        suite="oc_check",
        seed=ensemble.seed,
        scenario_hash=ensemble.scenario.scenario_hash(),
        n_paths=ensemble.n_paths,
        meta={
            "difference_direction": direction,
            "open_question": "the sign of the difference-process drift is ambiguous; "
            "direction is a parameter of this suite",
            "dual": dual.tag,
        },
    )
    tests = {xp: sampler.wealths(ensemble, xp) for xp in x_primes}
    for x in xs:
        xstar = flow.evaluate(paths, tpos, x)
        ydual = dual.evaluate(paths, tidx[None, :], x)
        if "optimum" in branches:
            report.extend(
                conditional_drift_test(xstar * ydual, spec.with_direction("martingale"), f"X*Y[x={x:g}]", state=xstar, deflator=defl)
            )
        for xp in x_primes:
            for name, w in tests[xp]:
                xt = _market_wealth(w, ensemble, tidx, market, None)
                if "difference" in branches:
                    report.extend(
                        conditional_drift_test(
                            (xt - xstar) * ydual,
                            spec.with_direction(direction),
                            f"(X-X*)Y[{name},x={x:g},x'={xp:g}]",
                            state=xt,
                            deflator=defl,
                            scale=(xt + xstar) * ydual,
                        )
                    )
                if "test" in branches and x == xs[0]:
                    report.extend(
                        conditional_drift_test(
                            xt * ydual,
                            spec.with_direction("supermartingale"),
                            f"XY[{name},x={x:g},x'={xp:g}]",
                            state=xt,
                            deflator=defl,
                        )
                    )
    return report


def shape_audit(field_, inada_ratio: float = 10.0) -> TestReport:
    """Deterministic shape axioms on every (path, time): increase, concavity, Inada range.

    Concavity uses secant slopes on the (nonuniform) grid with tolerance 0;
    NaN (truncated) nodes are skipped. ``statistic`` holds the worst
    violation and the witness is named in ``warning``.
    """
    u = field_.U_values
    ux = field_.Ux_values
    g = field_.x_grid
    # growth to infinity cannot be checked on a finite grid: record where the grid stops instead
    meta = {
        "tolerance": 0.0,
        "x_range": [float(g[0]), float(g[-1])],
        "truncated_fraction": float(np.mean(~np.isfinite(u))),
    }
    report = TestReport(suite="shape_audit", n_paths=field_.n_paths, meta=meta)
    slopes = np.diff(u, axis=-1) / np.diff(g)
    checks = {
        "strict-increase": -np.diff(u, axis=-1),  # violation if >= 0
        "concavity": np.diff(slopes, axis=-1),  # violation if > 0
        "strict-concavity": np.diff(slopes, axis=-1),  # violation if >= 0
        "marginal-decrease": np.diff(ux, axis=-1),  # violation if >= 0
    }
    strict = {"strict-increase": True, "concavity": False, "strict-concavity": True, "marginal-decrease": True}
    for name, arr in checks.items():
        finite = np.isfinite(arr)
        bad = (arr >= 0) if strict[name] else (arr > 0)
        bad &= finite
        worst = float(np.max(np.where(finite, arr, -np.inf))) if finite.any() else float("nan")
        warning = None
        if bad.any():
            p, t, n = (int(v) for v in np.argwhere(bad)[0])
            warning = f"witness path={p} time={t} node={n}"
        report.cases.append(CaseResult(name, worst, 0.0, "deterministic", "fail" if bad.any() else "pass", warning))
    with np.errstate(invalid="ignore", divide="ignore"):
        first = ux[..., 0]
        valid = np.isfinite(ux)
        last_idx = valid.shape[-1] - 1 - np.argmax(valid[..., ::-1], axis=-1)
        last = np.take_along_axis(ux, last_idx[..., None], -1)[..., 0]
        ratio = first / last
    bad = ~(ratio >= inada_ratio)
    warning = None
    if bad.any():
        p, t = (int(v) for v in np.argwhere(bad)[0])
        warning = f"witness path={p} time={t}"
    report.cases.append(
        CaseResult("inada-range", float(np.nanmin(ratio)), 0.0, "deterministic", "fail" if bad.any() else "pass", warning)
    )
    return report
