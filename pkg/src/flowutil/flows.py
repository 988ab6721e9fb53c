"""Strictly monotone optimal-wealth flows X*_t(x), their inverses and compositions.

A flow is tabulated on a log-spaced capital grid for every (path, time) and
interpolated by a monotone cubic in log-log coordinates, so that power-law
flows are reproduced exactly and strict monotonicity is inherited between
nodes. Queries outside the tabulated capital range raise ``RangeError``;
nothing is extrapolated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GridMismatchError, MonotonicityError, RangeError
from .market import PathEnsemble
from .numerics import MonotoneTable

GENERATOR_KINDS = ("linear", "two-fund", "custom-tabulated")


def default_grid(x_min: float = 1e-3, x_max: float = 1e3, n_nodes: int = 241) -> np.ndarray:
    if not 0 < x_min < x_max:
        raise ConfigurationError("capital grid needs 0 < x_min < x_max", module="flow_engine")
    return np.geomspace(x_min, x_max, n_nodes)


def _loadings(kind: str, x: np.ndarray) -> list[np.ndarray]:
    if kind == "linear":
        return [x]
    if kind == "two-fund":
        return [x * x / (1.0 + x), x / (1.0 + x)]
    raise ConfigurationError(f"generator {kind!r} has no closed-form loadings", module="flow_engine")


@dataclass(frozen=True, eq=False)
class FlowGeneratorSpec:
    """Scenario family for X*.

    ``linear``: X*_t(x) = x M_t. ``two-fund``: X*_t(x) = x^2/(1+x) M1_t +
    x/(1+x) M2_t. ``sources`` names the ensemble martingales (see
    ``PathEnsemble.martingale``). ``custom-tabulated`` takes ``table`` of shape
    (P, n_times, n_nodes) directly.
    """

    kind: str = "linear"
    sources: tuple[str, ...] = ("asset:0",)
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigurationError(f"unknown flow generator {self.kind!r}", module="flow_engine")
        need = {"linear": 1, "two-fund": 2}.get(self.kind)
        if need is not None and len(self.sources) != need:
            raise ConfigurationError(f"{self.kind} generator needs {need} martingale source(s)", module="flow_engine")
        if self.kind == "two-fund" and self.sources[0] == self.sources[1]:
            raise ConfigurationError("two-fund generator needs two distinct (independent) martingales", module="flow_engine")
        if self.kind == "custom-tabulated" and self.table is None:
            raise ConfigurationError("custom-tabulated generator needs a table", module="flow_engine")

    @property
    def tag(self) -> str:
        if self.kind == "custom-tabulated":
            return "custom-tabulated"
        return f"{self.kind}[{','.join(self.sources)}]"


@dataclass(eq=False)
class FlowField:
    """X*_t(x) on (path, time, capital node).

    ``time_index`` maps each stored time to its position in the ensemble grid.
    """

    x_grid: np.ndarray
    times: np.ndarray
    time_index: np.ndarray
    values: np.ndarray
    generator_tag: str
    sources: tuple[str, ...] = ()
    table: MonotoneTable = field(init=False, repr=False)

    def __post_init__(self):
        p, t, n = self.values.shape
        self.table = MonotoneTable(np.log(self.x_grid), np.log(self.values).reshape(p * t, n))

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def x_min(self) -> float:
        return float(self.x_grid[0])

    @property
    def x_max(self) -> float:
        return float(self.x_grid[-1])

    def rows(self, paths, tpos):
        return np.asarray(paths, dtype=np.intp) * self.n_times + np.asarray(tpos, dtype=np.intp)

    def time_position(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[idx], t, rtol=0, atol=1e-12 * max(1.0, float(self.times[-1]))):
            raise GridMismatchError(f"time {t} is not stored in this flow field")
        return idx

    def attainable_interval(self, path: int, tpos: int) -> tuple[float, float]:
        return float(self.values[path, tpos, 0]), float(self.values[path, tpos, -1])

    def evaluate(self, paths, tpos, x):
        """X*_t(x) for capital x within [x_min, x_max]."""
        x = np.asarray(x, dtype=float)
        if np.any((x < self.x_min * (1 - 1e-14)) | (x > self.x_max * (1 + 1e-14))):
            raise RangeError(
                f"capital outside the tabulated range [{self.x_min:g}, {self.x_max:g}]",
                (self.x_min, self.x_max),
            )
        return np.exp(self.table.value(self.rows(paths, tpos), np.log(x)))

    def inverse(self, paths, tpos, z):
        """Inverse flow cal-X(t, z): the capital x with X*_t(x) = z."""
        z = np.asarray(z, dtype=float)
        rows = self.rows(paths, tpos)
        with np.errstate(divide="ignore", invalid="ignore"):
            s, inside = self.table.invert(rows, np.log(z))
        if not np.all(inside):
            bad = np.argwhere(~np.broadcast_to(inside, s.shape))[0]
            r = int(np.broadcast_to(rows, s.shape)[tuple(bad)])
            lo, hi = np.exp(self.table.y[r, 0]), np.exp(self.table.y[r, -1])
            zb = float(np.broadcast_to(z, s.shape)[tuple(bad)])
            raise RangeError(
                f"wealth {zb:g} outside attainable interval [{lo:g}, {hi:g}] "
                f"(path {r // self.n_times}, time {self.times[r % self.n_times]:g})",
                (lo, hi),
            )
        return np.exp(s)


def build_flow_field(spec: FlowGeneratorSpec, x_grid, ensemble: PathEnsemble, times=None) -> FlowField:
    """Evaluate the generator pathwise on the grid and audit strict monotonicity.

    ``times`` selects ensemble time indices (default: every time).
    """
    x = np.asarray(x_grid, dtype=float)
    if x.ndim != 1 or x.size < 2 or not np.all(np.diff(x) > 0) or x[0] <= 0:
        raise ConfigurationError("capital grid must be strictly increasing with positive nodes", module="flow_engine")
    tidx = np.arange(ensemble.times.size) if times is None else np.asarray(times, dtype=np.intp)
    if tidx.size == 0 or np.any(np.diff(tidx) <= 0) or tidx[0] < 0 or tidx[-1] >= ensemble.times.size:
        raise ConfigurationError("time selection must be increasing indices into the ensemble grid", module="flow_engine")

    if spec.kind == "custom-tabulated":
        values = np.array(spec.table, dtype=float)
        if values.shape != (ensemble.n_paths, tidx.size, x.size):
            raise GridMismatchError(f"custom table shape {values.shape} does not match the lattice")
    else:
        values = np.zeros((ensemble.n_paths, tidx.size, x.size))
        for loading, source in zip(_loadings(spec.kind, x), spec.sources):
            m = ensemble.martingale(source)[:, tidx]
            values += m[:, :, None] * loading
        if tidx[0] == 0:
            if not np.allclose(values[:, 0, :], x, rtol=1e-12, atol=0):
                raise ConfigurationError("generator sources must start at 1 so that X*_0(x) = x", module="flow_engine")
            values[:, 0, :] = x

    _audit_monotone(values)
    return FlowField(
        x_grid=x,
        times=ensemble.times[tidx],
        time_index=tidx,
        values=values,
        generator_tag=spec.tag,
        sources=tuple(spec.sources),
    )


def _audit_monotone(values: np.ndarray):
    bad_value = ~(np.isfinite(values) & (values > 0))
    if bad_value.any():
        p, t, n = (int(v) for v in np.argwhere(bad_value)[0])
        raise MonotonicityError(f"non-positive or non-finite flow value at path {p}, time {t}, node {n}")
    steps = np.diff(values, axis=-1)
    bad = steps <= 0
    if bad.any():
        p, t, n = (int(v) for v in np.argwhere(bad)[0])
        raise MonotonicityError(
            f"flow not strictly increasing at path {p}, time position {t}, node {n} "
            f"({values[p, t, n]:.17g} -> {values[p, t, n + 1]:.17g})"
        )


def invert_flow(flow: FlowField, t: float, z, path):
    """cal-X(t, z) on the given path(s)."""
    return flow.inverse(path, flow.time_position(t), z)


def compose_flow(flow: FlowField, s: float, x, t: float, path):
    """X*_t(s, x) = X*_t(cal-X(s, x)): wealth at t of the optimum restarted at s from x."""
    if s > t:
        raise ValueError(f"composition needs s <= t (got s={s}, t={t})")
    sp = flow.time_position(s)
    tp = flow.time_position(t)
    w = flow.inverse(path, sp, x)
    if sp == tp:
        return np.asarray(x, dtype=float)[()]
    return flow.evaluate(path, tp, w)
