"""Utility random fields built from a (flow, dual flow) pair.

The field is U(t, x) = int_0^x Y(t, cal-X(t, z)) dz, where cal-X inverts the
optimal-wealth flow and Y is the dual flow. Two quadrature routes are
available:

* ``flow`` (default) integrates Y(t, w) dX*_t(w) over the capital variable w,
  cell by cell on the flow grid, then maps x back through the inverse flow.
* ``direct`` integrates z -> Y(t, cal-X(t, z)) in the wealth variable, with an
  inversion of the flow at every quadrature node.

Below the first grid node both routes use the same power-law asymptote,
fitted from the first flow cell and the analytic dual log-slope.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import (
    ConfigurationError,
    GridMismatchError,
    IntegrabilityError,
    ParameterError,
    PreconditionError,
    RangeError,
    TruncationWarning,
)
from .flows import FlowField
from .numerics import adaptive_gauss, bisect_decreasing, golden_section_max

if TYPE_CHECKING:
    from .duality import DualFlow

_CHUNK = 400_000  # quadrature intervals processed per batch


@dataclass(frozen=True)
class UtilityFunction:
    """Power family u(x) = sum_k w_k x^g_k / g_k with every g_k in (0, 1).

    A single term is the ``power`` family; several terms form a
    ``power-mixture``. u(0) = 0 and the Inada conditions hold for both.
    """

    family: str
    gammas: tuple[float, ...]
    weights: tuple[float, ...]

    @property
    def _g(self):
        return np.asarray(self.gammas)[:, None]

    @property
    def _w(self):
        return np.asarray(self.weights)[:, None]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "power":
            g = self.gammas[0]
            return x**g / g
        flat = x.reshape(1, -1)
        return (self._w * flat**self._g / self._g).sum(0).reshape(x.shape)

    def marginal(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "power":
            return x ** (self.gammas[0] - 1.0)
        flat = x.reshape(1, -1)
        return (self._w * flat ** (self._g - 1.0)).sum(0).reshape(x.shape)

    def marginal_log_slope(self, x):
        """-d log u_x / d log x, equal to 1 - gamma for the pure power."""
        x = np.asarray(x, dtype=float)
        if self.family == "power":
            return np.full(x.shape, 1.0 - self.gammas[0])[()]
        flat = x.reshape(1, -1)
        terms = self._w * flat ** (self._g - 1.0)
        return ((terms * (1.0 - self._g)).sum(0) / terms.sum(0)).reshape(x.shape)[()]

    def inverse_marginal(self, y):
        """(u_x)^{-1}(y) = -u~_y(y)."""
        y = np.asarray(y, dtype=float)
        if self.family == "power":
            return y ** (1.0 / (self.gammas[0] - 1.0))
        g = np.asarray(self.gammas)
        w = np.asarray(self.weights)
        flat = y.reshape(-1, 1)
        lo = np.min((w / flat) ** (1.0 / (1.0 - g)), axis=1)
        hi = np.max((g.size * w / flat) ** (1.0 / (1.0 - g)), axis=1)
        root = bisect_decreasing(self.marginal, flat[:, 0], lo, hi)
        return root.reshape(y.shape)

    def conjugate(self, y):
        """u~(y) = sup_x (u(x) - x y)."""
        y = np.asarray(y, dtype=float)
        if self.family == "power":
            g = self.gammas[0]
            return (1.0 - g) / g * y ** (-g / (1.0 - g))
        x = self.inverse_marginal(y)
        return self.value(x) - x * y

    def conjugate_derivative(self, y):
        return -self.inverse_marginal(y)


def initial_utility(family: str = "power", params: dict | None = None, **kwargs) -> UtilityFunction:
    """Closed-form initial utility.

    ``power`` takes ``gamma``; ``power-mixture`` takes ``gammas`` and
    ``weights`` (positive, summing to one).
    """
    params = dict(params or {}, **kwargs)
    if family == "power":
        g = float(params.get("gamma", 0.5))
        if not 0.0 < g < 1.0:
            raise ParameterError(f"power utility needs gamma in (0, 1), got {g}")
        return UtilityFunction("power", (g,), (1.0,))
    if family == "power-mixture":
        gammas = tuple(float(v) for v in params["gammas"])
        weights = tuple(float(v) for v in params["weights"])
        if len(gammas) != len(weights) or not gammas:
            raise ParameterError("mixture needs matching, non-empty gammas and weights")
        if not all(0.0 < g < 1.0 for g in gammas):
            raise ParameterError("every mixture exponent must lie in (0, 1)")
        if not all(w > 0 for w in weights) or not np.isclose(sum(weights), 1.0, rtol=0, atol=1e-12):
            raise ParameterError("mixture weights must be positive and sum to 1")
        return UtilityFunction("power-mixture", gammas, weights)
    raise ParameterError(f"unknown utility family {family!r}")


def small_capital_integral(u: UtilityFunction, scale, x_star0, exponent, x_min: float, w):
    """int_0^w scale u_x(v) dX(v) for the power-law flow X(v) = x_star0 (v / x_min)^exponent.

    Exact term by term for the power family; needs exponent > 1 - gamma_k for
    every term (checked by the caller).
    """
    total = 0.0
    ratio = np.asarray(w, dtype=float) / x_min
    for g, wt in zip(u.gammas, u.weights):
        b = 1.0 - g
        total = total + wt * x_min ** (-b) * x_star0 * exponent / (exponent - b) * ratio ** (exponent - b)
    return scale * total


def dual_exponent(u: UtilityFunction) -> float:
    """Largest -d log u_x / d log x over the power terms (controls integrability at 0)."""
    return 1.0 - min(u.gammas)


class FlowSource:
    """Exact evaluator of U, U_x and the conjugate for a (flow, dual) pair.

    Holds per-row cumulative integrals G(w_k) = int_0^{w_k} Y dX* on the flow
    grid; off-grid capitals use one extra partial-cell quadrature.
    """

    def __init__(self, flow: FlowField, dual: "DualFlow", rtol: float = 1e-12):
        self.flow = flow
        self.dual = dual
        self.u = dual.utility
        self.rtol = rtol
        p, t, n = flow.values.shape
        rows = np.arange(p * t)
        self.Z = dual.modulation[rows // t, flow.time_index[rows % t]]
        lx = flow.table.x
        ly = flow.table.y
        self.lx = lx
        self.a = (ly[:, 1] - ly[:, 0]) / (lx[1] - lx[0])
        self.b = dual_exponent(self.u)
        if np.any(self.a <= self.b):
            r = int(np.argmax(self.a <= self.b))
            raise IntegrabilityError(
                f"Y(t, cal-X(t, z)) is not integrable near z = 0 for flow {flow.generator_tag} "
                f"with dual {dual.tag} (row {r}: flow exponent {self.a[r]:.4g} <= dual exponent {self.b:.4g})"
            )
        self.X0 = np.exp(ly[:, 0])
        self.Xmax = np.exp(ly[:, -1])
        self.Y0 = self.Z * self.u.marginal(flow.x_min)
        self.A = small_capital_integral(self.u, self.Z, self.X0, self.a, flow.x_min, flow.x_min)
        self._cum = np.empty((rows.size, n))
        self._ready = np.zeros(rows.size, dtype=bool)

    def cumulative(self, rows):
        """Cumulative integrals on the grid nodes, computed on first use per row."""
        rows = np.asarray(rows, dtype=np.intp)
        todo = np.unique(rows[~self._ready[rows]])
        if todo.size:
            cells = self._cell_integrals(todo)
            block = np.empty((todo.size, cells.shape[1] + 1))
            block[:, 0] = self.A[todo]
            np.cumsum(cells, axis=1, out=block[:, 1:])
            block[:, 1:] += self.A[todo, None]
            self._cum[todo] = block
            self._ready[todo] = True
        return self._cum

    # integrand of int Y dX* in s = log w, inside flow cell k
    def _g(self, rows, k, s):
        p, dp = self.flow.table.value(rows, s, derivative=True, cell=k)
        return self.Z[rows] * self.u.marginal(np.exp(s)) * np.exp(p) * dp

    def _integrate(self, rows, lo, hi, cells=None):
        if cells is None:
            cells = self.flow.table.cell_of(0.5 * (lo + hi))
        out = np.empty(lo.size)
        for start in range(0, lo.size, _CHUNK):
            sl = slice(start, start + _CHUNK)
            r, k = rows[sl], cells[sl]
            out[sl], _ = adaptive_gauss(
                lambda s, o, r=r, k=k: self._g(r[o][:, None], k[o][:, None], s), lo[sl], hi[sl], rtol=self.rtol
            )
        return out

    def _cell_integrals(self, rows):
        n = self.lx.size
        r = np.repeat(rows, n - 1)
        lo = np.tile(self.lx[:-1], rows.size)
        hi = np.tile(self.lx[1:], rows.size)
        cells = np.tile(np.arange(n - 1), rows.size)
        return self._integrate(r, lo, hi, cells).reshape(rows.size, n - 1)

    def along_flow(self, rows, w):
        """G(w) = int_0^w Y(t, v) dX*_t(v), i.e. U(t, X*_t(w))."""
        rows, w = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(w, dtype=float)))
        out = np.empty(w.size)
        below = w < self.flow.x_min
        if below.any():
            r = rows[below]
            out[below] = small_capital_integral(self.u, self.Z[r], self.X0[r], self.a[r], self.flow.x_min, w[below])
        inside = ~below
        if inside.any():
            r = rows[inside]
            s = np.log(np.minimum(w[inside], self.flow.x_max))
            k = self.flow.table.cell_of(s)
            out[inside] = self.cumulative(r)[r, k] + self._integrate(r, self.lx[k], s, k)
        return out

    def inverse_capital(self, rows, x, strict=True):
        """cal-X(t, x), using the power asymptote below X*_t(x_min)."""
        rows, x = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(x, dtype=float)))
        w = np.full(x.size, np.nan)
        below = x < self.X0[rows]
        above = x > self.Xmax[rows] * (1 + 1e-13)  # allow the log/exp roundtrip of the last node
        if strict and above.any():
            i = int(np.argmax(above))
            raise RangeError(
                f"wealth {x[i]:g} above the attainable maximum {self.Xmax[rows[i]]:g} of the truncated flow",
                (0.0, float(self.Xmax[rows[i]])),
            )
        if below.any():
            r = rows[below]
            w[below] = self.flow.x_min * (x[below] / self.X0[r]) ** (1.0 / self.a[r])
        mid = ~below & ~above
        if mid.any():
            s, _ = self.flow.table.invert(rows[mid], np.log(x[mid]))
            w[mid] = np.exp(s)
        return w

    def value(self, rows, x, strict=True, capital=None):
        """U(t, x); ``capital`` may carry a precomputed cal-X(t, x)."""
        shape = np.broadcast(np.asarray(rows), np.asarray(x)).shape
        rows_f, x_f = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(x, dtype=float)))
        w = self.inverse_capital(rows_f, x_f, strict) if capital is None else np.ravel(capital)
        out = np.full(x_f.size, np.nan)
        ok = np.isfinite(w)
        out[ok] = self.along_flow(rows_f[ok], w[ok])
        return out.reshape(shape)

    def marginal(self, rows, x, strict=True, capital=None):
        shape = np.broadcast(np.asarray(rows), np.asarray(x)).shape
        rows_f, x_f = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(x, dtype=float)))
        w = self.inverse_capital(rows_f, x_f, strict) if capital is None else np.ravel(capital)
        return (self.Z[rows_f] * self.u.marginal(w)).reshape(shape)

    def materialize(self, rows, x):
        """(U, U_x) at all (rows, x) pairs with a single flow inversion."""
        shape = np.broadcast(np.asarray(rows), np.asarray(x)).shape
        rows_f, x_f = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(x, dtype=float)))
        w = self.inverse_capital(rows_f, x_f, strict=False)
        return (
            self.value(rows_f, x_f, capital=w).reshape(shape),
            self.marginal(rows_f, x_f, capital=w).reshape(shape),
        )

    def conjugate(self, rows, y):
        """U~(t, y) = U(t, I) - y I with I = X*_t(Y^{-1}(t, y))."""
        shape = np.broadcast(np.asarray(rows), np.asarray(y)).shape
        rows_f, y_f = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(y, dtype=float)))
        w = self.u.inverse_marginal(y_f / self.Z[rows_f])
        if np.any(w > self.flow.x_max * (1 + 1e-12)):
            raise RangeError("dual level below the truncated range of the dual flow")
        x_star = np.where(
            w < self.flow.x_min,
            self.X0[rows_f] * (w / self.flow.x_min) ** self.a[rows_f],
            np.exp(self.flow.table.value(rows_f, np.log(np.clip(w, self.flow.x_min, self.flow.x_max)))),
        )
        return (self.along_flow(rows_f, w) - y_f * x_star).reshape(shape)


class DirectSource(FlowSource):
    """Same field computed by quadrature in the wealth variable z."""

    def _h(self, rows, q):
        s, _ = self.flow.table.invert(rows, q)
        return self.Z[rows] * self.u.marginal(np.exp(s)) * np.exp(q)

    def _integrate(self, rows, lo, hi, cells=None):
        out = np.empty(lo.size)
        for start in range(0, lo.size, _CHUNK):
            sl = slice(start, start + _CHUNK)
            r = rows[sl]
            out[sl], _ = adaptive_gauss(lambda q, o, r=r: self._h(r[o][:, None], q), lo[sl], hi[sl], rtol=self.rtol)
        return out

    def _cell_integrals(self, rows):
        ly = self.flow.table.y[rows]
        r = np.repeat(rows, ly.shape[1] - 1)
        return self._integrate(r, ly[:, :-1].ravel(), ly[:, 1:].ravel()).reshape(rows.size, -1)

    def along_flow(self, rows, w):
        rows, w = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(w, dtype=float)))
        x = np.where(
            w < self.flow.x_min,
            np.nan,
            np.exp(self.flow.table.value(rows, np.log(np.clip(w, self.flow.x_min, self.flow.x_max)))),
        )
        return self._value_at_wealth(rows, x, w)

    def _value_at_wealth(self, rows, x, w):
        out = np.empty(w.size)
        below = w < self.flow.x_min
        if below.any():
            r = rows[below]
            out[below] = small_capital_integral(self.u, self.Z[r], self.X0[r], self.a[r], self.flow.x_min, w[below])
        inside = ~below
        if inside.any():
            r = rows[inside]
            k = self.flow.table.cell_of(np.log(np.minimum(w[inside], self.flow.x_max)))
            lo = self.flow.table.y[r, k]
            out[inside] = self.cumulative(r)[r, k] + self._integrate(r, lo, np.log(x[inside]))
        return out

    def value(self, rows, x, strict=True, capital=None):
        shape = np.broadcast(np.asarray(rows), np.asarray(x)).shape
        rows_f, x_f = (a.ravel() for a in np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(x, dtype=float)))
        w = self.inverse_capital(rows_f, x_f, strict) if capital is None else np.ravel(capital)
        out = np.full(x_f.size, np.nan)
        ok = np.isfinite(w)
        out[ok] = self._value_at_wealth(rows_f[ok], x_f[ok], w[ok])
        return out.reshape(shape)


class NumeraireSource:
    """V(t, x) = U(t, x Y_t) on top of another field."""

    def __init__(self, base: "UtilityField", numeraire: np.ndarray):
        self.base = base
        self.Y = numeraire  # (P, n_times)

    def _split(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return rows // self.base.n_times, rows % self.base.n_times

    def value(self, rows, x, strict=True):
        p, t = self._split(rows)
        return self.base.evaluate(p, t, np.asarray(x) * self.Y[p, t], strict=strict)

    def marginal(self, rows, x, strict=True):
        p, t = self._split(rows)
        return self.Y[p, t] * self.base.marginal(p, t, np.asarray(x) * self.Y[p, t], strict=strict)


@dataclass(eq=False)
class UtilityField:
    """U(t, x) and U_x(t, x) per (path, time, capital node).

    ``source`` evaluates the field exactly off the grid; without one, values
    between nodes come from cubic Hermite interpolation of (U, U_x). Grid
    values are materialized on first access. Nodes outside the truncated
    domain hold NaN and are flagged in ``truncated``.
    """

    x_grid: np.ndarray
    times: np.ndarray
    time_index: np.ndarray
    n_paths: int
    provenance: dict = field(default_factory=dict)
    source: object = None
    grid_values: tuple | None = None

    @classmethod
    def from_arrays(cls, x_grid, times, time_index, U_values, Ux_values, provenance=None):
        u = np.asarray(U_values, dtype=float)
        return cls(np.asarray(x_grid, dtype=float), np.asarray(times), np.asarray(time_index), u.shape[0],
                   dict(provenance or {}), None, (u, np.asarray(Ux_values, dtype=float)))

    @property
    def n_times(self) -> int:
        return self.times.size

    def _grid(self):
        if self.grid_values is None:
            self.grid_values = _materialize(self.source, self.x_grid, self.n_paths, self.n_times)
        return self.grid_values

    @property
    def U_values(self) -> np.ndarray:
        return self._grid()[0]

    @property
    def Ux_values(self) -> np.ndarray:
        return self._grid()[1]

    @property
    def truncated(self) -> np.ndarray:
        return ~np.isfinite(self.U_values)

    def rows(self, paths, tpos):
        return np.asarray(paths, dtype=np.intp) * self.n_times + np.asarray(tpos, dtype=np.intp)

    def time_position(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[idx], t, rtol=0, atol=1e-12 * max(1.0, float(self.times[-1]))):
            raise GridMismatchError(f"time {t} is not stored in this utility field")
        return idx

    def evaluate(self, paths, tpos, x, strict=True):
        if self.source is not None:
            return self.source.value(self.rows(paths, tpos), x, strict)
        return self._hermite(paths, tpos, x, strict)[0]

    def marginal(self, paths, tpos, x, strict=True):
        if self.source is not None:
            return self.source.marginal(self.rows(paths, tpos), x, strict)
        return self._hermite(paths, tpos, x, strict)[1]

    def conjugate_rows(self, rows, y):
        """U~ at flat row indices; exact along the flow when the source allows it."""
        if hasattr(self.source, "conjugate"):
            return self.source.conjugate(rows, y)
        rows, y = np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(y, dtype=float))
        paths, tpos = rows // self.n_times, rows % self.n_times
        g = self.x_grid
        point = bisect_decreasing(
            lambda x: self.marginal(paths, tpos, x, strict=False), y, np.full(y.shape, g[0]), np.full(y.shape, g[-1])
        )
        return self.evaluate(paths, tpos, point, strict=False) - y * point

    def _hermite(self, paths, tpos, x, strict):
        paths, tpos, x = np.broadcast_arrays(np.asarray(paths), np.asarray(tpos), np.asarray(x, dtype=float))
        g = self.x_grid
        outside = (x < g[0]) | (x > g[-1])
        if strict and outside.any():
            raise RangeError(f"capital outside field grid [{g[0]:g}, {g[-1]:g}]", (g[0], g[-1]))
        k = np.clip(np.searchsorted(g, x, side="right") - 1, 0, g.size - 2)
        h = g[k + 1] - g[k]
        t = (x - g[k]) / h
        u0, u1 = self.U_values[paths, tpos, k], self.U_values[paths, tpos, k + 1]
        d0, d1 = self.Ux_values[paths, tpos, k] * h, self.Ux_values[paths, tpos, k + 1] * h
        t2, t3 = t * t, t * t * t
        v = (2 * t3 - 3 * t2 + 1) * u0 + (t3 - 2 * t2 + t) * d0 + (3 * t2 - 2 * t3) * u1 + (t3 - t2) * d1
        dv = ((6 * t2 - 6 * t) * (u0 - u1) + (3 * t2 - 4 * t + 1) * d0 + (3 * t2 - 2 * t) * d1) / h
        return np.where(outside, np.nan, v), np.where(outside, np.nan, dv)


def _check_pair(flow: FlowField, dual: "DualFlow"):
    if dual.modulation.shape[0] != flow.n_paths:
        raise GridMismatchError("dual flow and flow field come from ensembles of different size")
    if dual.modulation.shape[1] <= int(flow.time_index[-1]):
        raise GridMismatchError("dual flow does not cover the flow's time grid")
    if dual.x_grid.shape != flow.x_grid.shape or not np.allclose(dual.x_grid, flow.x_grid, rtol=1e-14, atol=0):
        raise GridMismatchError("dual flow and flow field use different capital grids")
    if dual.channel is not None and dual.channel in flow.sources:
        raise ConfigurationError(
            f"dual modulation {dual.channel} also drives the flow; independence of the dual factor is violated",
            module="utility_lab",
        )


def _materialize(source, x_grid, n_paths, n_times, block: int = 200_000):
    n_rows = n_paths * n_times
    u = np.empty((n_rows, x_grid.size))
    ux = np.empty((n_rows, x_grid.size))
    step = max(1, block // x_grid.size)
    for start in range(0, n_rows, step):
        rows = np.arange(start, min(start + step, n_rows))[:, None]
        if hasattr(source, "materialize"):
            u[rows[:, 0]], ux[rows[:, 0]] = source.materialize(rows, x_grid[None, :])
        else:
            u[rows[:, 0]] = source.value(rows, x_grid[None, :], strict=False)
            ux[rows[:, 0]] = source.marginal(rows, x_grid[None, :], strict=False)
    ux[~np.isfinite(u)] = np.nan
    return u.reshape(n_paths, n_times, -1), ux.reshape(n_paths, n_times, -1)


def build_utility_field(
    flow: FlowField,
    dual: "DualFlow",
    x_grid=None,
    route: str = "flow",
    rtol: float = 1e-12,
) -> UtilityField:
    """U(t, x) = int_0^x Y(t, cal-X(t, z)) dz on every (path, time) of the flow.

    ``x_grid`` defaults to the flow's capital grid. Nodes above the largest
    attainable wealth X*_t(x_max) are left as NaN (truncation).
    """
    _check_pair(flow, dual)
    if route == "flow":
        source = FlowSource(flow, dual, rtol)
    elif route == "direct":
        source = DirectSource(flow, dual, rtol)
    else:
        raise ConfigurationError(f"unknown construction route {route!r}", module="utility_lab")
    grid = flow.x_grid if x_grid is None else np.asarray(x_grid, dtype=float)
    return UtilityField(
        x_grid=grid,
        times=flow.times,
        time_index=flow.time_index,
        n_paths=flow.n_paths,
        provenance={"flow": flow.generator_tag, "dual": dual.tag, "route": route},
        source=source,
    )


def marginal_field(flow: FlowField, dual: "DualFlow", t: float, x, path):
    """U_x(t, x) = Y(t, cal-X(t, x)); x must lie in the attainable interval."""
    tpos = flow.time_position(t)
    w = flow.inverse(path, tpos, x)
    return dual.evaluate(path, flow.time_index[tpos], w)


def _conjugate_domain(field_: UtilityField, paths, tpos, y):
    ux = field_.Ux_values[paths, tpos]  # (m, n)
    valid = np.isfinite(ux)
    last = valid.shape[-1] - 1 - np.argmax(valid[..., ::-1], axis=-1)
    y_lo = np.take_along_axis(ux, last[..., None], -1)[..., 0]
    y_hi = ux[..., 0]
    bad = (y < y_lo) | (y > y_hi)
    if bad.any():
        i = np.argwhere(bad)[0]
        raise RangeError(
            f"dual level {float(y[tuple(i)]):g} outside [U_x(t, x_max), U_x(t, x_min)] = "
            f"[{float(y_lo[tuple(i)]):g}, {float(y_hi[tuple(i)]):g}]",
            (float(y_lo[tuple(i)]), float(y_hi[tuple(i)])),
        )
    return last


def fenchel_conjugate(field_: UtilityField, t: float, y, path, route: str = "grid"):
    """U~(t, y) = max_x (U(t, x) - x y) over the field's capital grid.

    ``grid``: best grid node refined by golden section between its neighbours.
    ``legendre``: U(t, I) - y I with I the monotone inverse of U_x (bisection).
    """
    tpos = field_.time_position(t)
    paths, y = np.broadcast_arrays(np.asarray(path, dtype=np.intp), np.asarray(y, dtype=float))
    if np.any(y <= 0):
        raise RangeError("dual level must be positive")
    tp = np.full(paths.shape, tpos)
    last = _conjugate_domain(field_, paths, tp, y)
    g = field_.x_grid
    if route == "grid":
        obj = field_.U_values[paths, tp] - g * y[..., None]
        obj = np.where(np.isfinite(obj), obj, -np.inf)
        k = np.argmax(obj, axis=-1)
        lo = g[np.maximum(k - 1, 0)]
        hi = g[np.minimum(k + 1, last)]
        _, best = golden_section_max(lambda x: field_.evaluate(paths, tp, x) - x * y, lo, hi)
        node_best = np.take_along_axis(obj, k[..., None], -1)[..., 0]
        return np.maximum(best, node_best)[()]
    if route == "legendre":
        x_hi = g[last]
        point = bisect_decreasing(lambda x: field_.marginal(paths, tp, x), y, np.full(y.shape, g[0]), x_hi)
        return (field_.evaluate(paths, tp, point) - y * point)[()]
    raise ConfigurationError(f"unknown conjugate route {route!r}", module="utility_lab")


def conjugate_via_flow(flow: FlowField, dual: "DualFlow", t: float, y, path, rtol: float = 1e-12):
    """U~(t, y) = int_y^inf X*_t(Y^{-1}(t, z)) dz.

    Quadrature in log z between the dual levels of consecutive grid nodes on
    [y, Y(t, x_min)], plus the analytic power-law tail above Y(t, x_min).
    """
    tpos = flow.time_position(t)
    ti = int(flow.time_index[tpos])
    paths, y = np.broadcast_arrays(np.asarray(path, dtype=np.intp), np.asarray(y, dtype=float))
    shape = y.shape
    paths, y = paths.ravel(), y.ravel()
    u = dual.utility
    rows = flow.rows(paths, tpos)
    Z = dual.modulation[paths, ti]
    levels = Z[:, None] * u.marginal(flow.x_grid)[None, :]  # decreasing along nodes
    y_max, y_min = levels[:, 0], levels[:, -1]
    bad = (y < y_min * (1 - 1e-14)) | (y > y_max * (1 + 1e-14))
    if bad.any():
        i = int(np.argmax(bad))
        raise RangeError(
            f"dual level {y[i]:g} outside the dual range [{y_min[i]:g}, {y_max[i]:g}]",
            (float(y_min[i]), float(y_max[i])),
        )
    ly = flow.table.y
    a = (ly[rows, 1] - ly[rows, 0]) / (flow.table.x[1] - flow.table.x[0])
    b = dual_exponent(u)
    X0 = np.exp(ly[rows, 0])
    ok = a > b
    safe_a = np.where(ok, a, b + 1.0)
    # int_{y_max}^inf = U(t, X0) - y_max X0 with U(t, X0) from the power-law asymptote
    tail = np.where(ok, small_capital_integral(u, Z, X0, safe_a, flow.x_min, flow.x_min) - y_max * X0, 0.0)
    if not ok.all():
        warnings.warn(
            TruncationWarning(
                "conjugate tail above Y(t, x_min) is not integrable in closed form; integral truncated there",
                tail_bound=float(np.max(y_max[~ok])),
            )
        )

    top = np.log(levels[:, :-1])
    bottom = np.log(np.maximum(levels[:, 1:], y[:, None]))
    live = top > bottom
    owner = np.nonzero(live)[0]
    q_lo, q_hi = bottom[live], top[live]

    def integrand(q, o):
        r = owner[o][:, None]
        w = u.inverse_marginal(np.exp(q) / Z[r])
        s = np.log(np.clip(w, flow.x_min, flow.x_max))
        return np.exp(flow.table.value(rows[r], s) + q)

    body = np.zeros(y.size)
    for start in range(0, q_lo.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        vals, _ = adaptive_gauss(
            lambda q, o, off=start: integrand(q, o + off), q_lo[sl], q_hi[sl], rtol=rtol
        )
        np.add.at(body, owner[sl], vals)
    return (body + tail).reshape(shape)[()]


def numeraire_transform(field_: UtilityField, numeraire, x_grid=None) -> UtilityField:
    """V(t, x) = U(t, x Y_t).

    ``numeraire`` is (P, n_times) on the field's times, or (P, n_steps+1) on
    the full ensemble grid (the field's times are then selected).
    """
    y = np.asarray(numeraire.values if hasattr(numeraire, "values") else numeraire, dtype=float)
    if y.ndim != 2 or y.shape[0] != field_.n_paths:
        raise GridMismatchError("numeraire must be a (paths, times) array on the field's ensemble")
    if y.shape[1] != field_.n_times:
        if y.shape[1] <= int(field_.time_index[-1]):
            raise GridMismatchError("numeraire does not cover the field's time grid")
        y = y[:, field_.time_index]
    if not np.all(y > 0):
        raise ConfigurationError("numeraire must be strictly positive", module="utility_lab")
    grid = field_.x_grid if x_grid is None else np.asarray(x_grid, dtype=float)
    source = NumeraireSource(field_, y)
    prov = dict(field_.provenance, numeraire="transformed")
    return UtilityField(grid, field_.times, field_.time_index, field_.n_paths, prov, source)


def initial_market_field(deflator, flow: FlowField, u: UtilityFunction, x_grid=None, check: bool = True, x_check=(0.5, 1.0, 2.0)):
    """U(t, x) = M_t int_0^x u_x(cal-X(t, z)) dz for the non-deflated market.

    Requires M_0 = 1 and X* M a martingale; the latter is drift-tested on
    ``x_check`` capitals when the ensemble is large enough for the test.
    """
    from .duality import DualFlow
    from .verifier import DriftTestSpec, conditional_drift_test

    m = np.asarray(deflator, dtype=float)
    if m.ndim != 2 or m.shape[0] != flow.n_paths:
        raise GridMismatchError("deflator must be a (paths, times) array on the flow's ensemble")
    if not np.all(m > 0):
        raise PreconditionError("deflator must be strictly positive")
    if not np.allclose(m[:, 0], 1.0, rtol=0, atol=1e-12):
        raise PreconditionError("deflator must start at 1")

    status = "skipped"
    if check:
        spec = DriftTestSpec.default_pairs(flow.n_times, direction="martingale")
        if flow.n_paths >= spec.min_paths and flow.n_times > 1:
            mt = m[:, flow.time_index]
            for x in x_check:
                xs = flow.evaluate(np.arange(flow.n_paths)[:, None], np.arange(flow.n_times)[None, :], x)
                report = conditional_drift_test(xs * mt, spec, name=f"X*M[x={x:g}]")
                if not report.passed:
                    raise PreconditionError(
                        f"X* M is not a martingale at x={x:g}"
                    )
            status = "passed"
    dual = DualFlow(x_grid=flow.x_grid, kind="deflator", utility=u, modulation=m, channel="deflator")
    result = build_utility_field(flow, dual, x_grid=x_grid)
    result.provenance.update(market="initial", precondition=status)
    result.dual = dual
    return result
