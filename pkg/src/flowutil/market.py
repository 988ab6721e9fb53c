"""Desk-scale lognormal securities market.

Assets follow a multi-dimensional geometric Brownian motion simulated by exact
log-Euler stepping on an equispaced grid. Test wealths are driven by
proportion strategies constrained to a convex set, and the state-price density
uses the minimal market price of risk.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ConstraintViolationError,
    GridMismatchError,
    SimulationError,
)

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
_ASSET_CHANNEL = 0
_AUX_CHANNEL = 1
_CONSTRAINT_KINDS = ("box", "cone")


@dataclass(frozen=True)
class ConstraintSet:
    """Convex set of admissible portfolio proportions.

    ``kind="cone"`` is the homogeneous test class: any positive initial
    capital is admissible, so the class of wealths is closed under positive
    scaling. ``kind="box"`` additionally caps initial capital at
    ``capital_cap``, which breaks homogeneity. Both kinds bound each
    proportion by ``lower <= pi <= upper`` (``upper`` may be ``inf``).
    """

    kind: str = "box"
    lower: tuple[float, ...] = (0.0,)
    upper: tuple[float, ...] = (1.0,)
    capital_cap: float = 1e3

    def __post_init__(self):
        if self.kind not in _CONSTRAINT_KINDS:
            raise ConfigurationError(f"constraint kind must be one of {_CONSTRAINT_KINDS}, got {self.kind!r}")
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("constraint bounds must be per-asset vectors of equal length")
        if not np.all(lo < hi):
            raise ConfigurationError("constraint set has empty interior (need lower < upper per asset)")
        if not np.all(np.isfinite(lo)):
            raise ConfigurationError("lower proportion bounds must be finite")
        if self.capital_cap <= 0:
            raise ConfigurationError("capital_cap must be positive")

    @property
    def homogeneous(self) -> bool:
        return self.kind == "cone"

    @property
    def dim(self) -> int:
        return len(self.lower)

    def interior_point(self) -> np.ndarray:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        return np.where(np.isfinite(hi), 0.5 * (lo + hi), lo + 1.0)

    def contains(self, pi, tol: float = 1e-12) -> np.ndarray:
        """Elementwise membership over the trailing (asset) axis."""
        pi = np.asarray(pi, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        return np.all((pi >= lo - tol) & (pi <= hi + tol), axis=-1)

    def admits_capital(self, x0) -> bool:
        x0 = np.asarray(x0, dtype=float)
        if np.any(x0 <= 0):
            return False
        return self.homogeneous or bool(np.all(x0 <= self.capital_cap))


@dataclass(frozen=True)
class MarketScenario:
    """Lognormal market description.

    ``volatility[i][j]`` loads asset i on Brownian driver j, so the asset
    covariance is ``sigma @ sigma.T``. ``aux_volatility`` lists the log-vols of
    independent positive unit-mean martingales simulated on a separate random
    channel (used for dual modulation and extra flow drivers).
    """

    n_assets: int = 1
    drift: tuple[float, ...] = (0.0,)
    volatility: tuple[tuple[float, ...], ...] = ((0.2,),)
    rate: float = 0.0
    horizon: float = 1.0
    n_steps: int = 256
    constraint_set: ConstraintSet = field(default_factory=ConstraintSet)
    initial_prices: tuple[float, ...] = (1.0,)
    aux_volatility: tuple[float, ...] = (0.2,)

    def __post_init__(self):
        d = self.n_assets
        if d < 1:
            raise ConfigurationError("n_assets must be at least 1")
        if len(self.drift) != d or len(self.initial_prices) != d:
            raise ConfigurationError("drift and initial_prices need one entry per asset")
        sigma = np.asarray(self.volatility, dtype=float)
        if sigma.shape != (d, d):
            raise ConfigurationError(f"volatility must be a {d}x{d} matrix, got shape {sigma.shape}")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be at least 1")
        if any(p <= 0 for p in self.initial_prices):
            raise ConfigurationError("initial prices must be positive")
        if any(v < 0 for v in self.aux_volatility):
            raise ConfigurationError("aux volatilities must be non-negative")
        if self.constraint_set.dim != d:
            raise ConfigurationError("constraint set dimension does not match n_assets")

    @property
    def sigma(self) -> np.ndarray:
        return np.asarray(self.volatility, dtype=float)

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.drift, dtype=float)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def n_aux(self) -> int:
        return len(self.aux_volatility)

    def full_rank(self) -> bool:
        return np.linalg.matrix_rank(self.sigma) == self.n_assets

    def market_price_of_risk(self) -> np.ndarray:
        """theta = sigma^{-1} (mu - r 1)."""
        if not self.full_rank():
            raise ConfigurationError("volatility matrix is singular; market price of risk undefined")
        return np.linalg.solve(self.sigma, self.mu - self.rate)

    def to_dict(self) -> dict:
        return {
            "n_assets": self.n_assets,
            "drift": list(self.drift),
            "volatility": [list(r) for r in self.volatility],
            "rate": self.rate,
            "horizon": self.horizon,
            "n_steps": self.n_steps,
            "initial_prices": list(self.initial_prices),
            "aux_volatility": list(self.aux_volatility),
            "constraint_set": {
                "kind": self.constraint_set.kind,
                "lower": list(self.constraint_set.lower),
                "upper": list(self.constraint_set.upper),
                "capital_cap": self.constraint_set.capital_cap,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketScenario":
        cs = data.get("constraint_set", {})
        return cls(
            n_assets=int(data["n_assets"]),
            drift=tuple(float(v) for v in data["drift"]),
            volatility=tuple(tuple(float(v) for v in row) for row in data["volatility"]),
            rate=float(data["rate"]),
            horizon=float(data["horizon"]),
            n_steps=int(data["n_steps"]),
            initial_prices=tuple(float(v) for v in data["initial_prices"]),
            aux_volatility=tuple(float(v) for v in data["aux_volatility"]),
            constraint_set=ConstraintSet(
                kind=cs.get("kind", "box"),
                lower=tuple(float(v) for v in cs.get("lower", [0.0] * int(data["n_assets"]))),
                upper=tuple(float(v) for v in cs.get("upper", [1.0] * int(data["n_assets"]))),
                capital_cap=float(cs.get("capital_cap", 1e3)),
            ),
        )

    def scenario_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Seeded Monte-Carlo sample of the market.

    Shapes: ``drivers`` (P, n_steps, d) Brownian increments; ``asset_paths``
    (P, n_steps+1, d); ``deflator_paths`` (P, n_steps+1); ``aux_martingales``
    (k, P, n_steps+1).
    """

    scenario: MarketScenario
    n_paths: int
    seed: int
    times: np.ndarray
    drivers: np.ndarray
    asset_paths: np.ndarray
    deflator_paths: np.ndarray
    aux_martingales: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def brownian(self) -> np.ndarray:
        """Cumulative Brownian motion W_t, shape (P, n_steps+1, d)."""
        w = np.zeros((self.n_paths, self.n_steps + 1, self.scenario.n_assets))
        np.cumsum(self.drivers, axis=1, out=w[:, 1:])
        return w

    def deflated_asset(self, i: int) -> np.ndarray:
        """M_t S^i_t / S^i_0: a positive unit-mean martingale."""
        s = self.asset_paths[:, :, i]
        return self.deflator_paths * s / s[:, :1]

    def martingale(self, source: str) -> np.ndarray:
        """Resolve a named positive process to a (P, n_steps+1) array.

        ``asset:i`` deflated normalized asset, ``aux:k`` independent auxiliary
        martingale, ``deflator`` the state-price density M,
        ``inverse_deflator`` 1/M (growth-optimal wealth), ``one`` constant.
        """
        kind, _, idx = source.partition(":")
        if kind == "asset":
            i = int(idx)
            if not 0 <= i < self.scenario.n_assets:
                raise ConfigurationError(f"no asset {i} in scenario")
            return self.deflated_asset(i)
        if kind == "aux":
            k = int(idx)
            if not 0 <= k < self.aux_martingales.shape[0]:
                raise ConfigurationError(f"ensemble has no auxiliary martingale {k}")
            return self.aux_martingales[k]
        if kind == "deflator":
            return self.deflator_paths
        if kind == "inverse_deflator":
            return 1.0 / self.deflator_paths
        if kind == "one":
            return np.ones_like(self.deflator_paths)
        raise ConfigurationError(f"unknown martingale source {source!r}")

    def time_position(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[idx], t, rtol=0, atol=1e-12 * max(1.0, self.times[-1])):
            raise GridMismatchError(f"time {t} is not on the simulation grid")
        return idx


def _block_normals(seed: int, channel: int, block: int, shape) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(channel, block))
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def _channel_normals(seed: int, channel: int, n_paths: int, n_steps: int, width: int) -> np.ndarray:
    """Counter-based draws: path p always comes from block p // BLOCK_SIZE.

    Blocks are generated at full size and sliced, so the draws of a given path
    do not depend on n_paths or on the order blocks are produced in.
    """
    out = np.empty((n_paths, n_steps, width))
    for block in range(-(-n_paths // BLOCK_SIZE)):
        lo = block * BLOCK_SIZE
        hi = min(lo + BLOCK_SIZE, n_paths)
        out[lo:hi] = _block_normals(seed, channel, block, (BLOCK_SIZE, n_steps, width))[: hi - lo]
    return out


def simulate_drivers(scenario: MarketScenario, n_paths: int, seed: int) -> PathEnsemble:
    """Simulate asset prices, the deflator and auxiliary martingales."""
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    sigma = scenario.sigma
    cov = sigma @ sigma.T
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConfigurationError("asset covariance sigma sigma^T is not positive definite") from None

    times = scenario.times
    dt = scenario.dt
    steps = scenario.n_steps
    dw = np.sqrt(dt) * _channel_normals(seed, _ASSET_CHANNEL, n_paths, steps, scenario.n_assets)

    log_s = np.empty((n_paths, steps + 1, scenario.n_assets))
    log_s[:, 0] = np.log(np.asarray(scenario.initial_prices))
    drift = (scenario.mu - 0.5 * np.diag(cov)) * dt
    np.cumsum(drift + dw @ sigma.T, axis=1, out=log_s[:, 1:])
    log_s[:, 1:] += log_s[:, :1]
    with np.errstate(over="ignore"):
        assets = np.exp(log_s)
    _check_finite(assets, "asset")

    if scenario.n_aux:
        db = np.sqrt(dt) * _channel_normals(seed, _AUX_CHANNEL, n_paths, steps, scenario.n_aux)
        vol = np.asarray(scenario.aux_volatility)
        log_z = np.zeros((n_paths, steps + 1, scenario.n_aux))
        np.cumsum(db * vol - 0.5 * vol**2 * dt, axis=1, out=log_z[:, 1:])
        with np.errstate(over="ignore"):
            aux = np.moveaxis(np.exp(log_z), 2, 0).copy()
        _check_finite(aux, "auxiliary martingale")
    else:
        aux = np.empty((0, n_paths, steps + 1))

    partial = PathEnsemble(
        scenario=scenario,
        n_paths=n_paths,
        seed=seed,
        times=times,
        drivers=dw,
        asset_paths=assets,
        deflator_paths=np.ones((n_paths, steps + 1)),
        aux_martingales=aux,
    )
    deflator = state_price_density(scenario, partial)
    _check_finite(deflator, "deflator")
    return PathEnsemble(
        scenario=scenario,
        n_paths=n_paths,
        seed=seed,
        times=times,
        drivers=dw,
        asset_paths=assets,
        deflator_paths=deflator,
        aux_martingales=aux,
    )


def _check_finite(values: np.ndarray, what: str):
    bad = ~np.isfinite(values) | (values <= 0)
    if bad.any():
        idx = np.argwhere(bad)[0]
        path = int(idx[1]) if values.ndim == 3 and what == "auxiliary martingale" else int(idx[0])
        raise SimulationError(f"{what} overflow or non-positive value on path {path}")


def state_price_density(scenario: MarketScenario, ensemble: PathEnsemble) -> np.ndarray:
    """M_t = exp(-theta.W_t - |theta|^2 t / 2 - r t) with theta = sigma^{-1}(mu - r)."""
    theta = scenario.market_price_of_risk()
    w = ensemble.brownian()
    t = ensemble.times
    log_m = -(w @ theta) - (0.5 * theta @ theta + scenario.rate) * t
    with np.errstate(over="ignore"):
        return np.exp(log_m)


@dataclass(frozen=True)
class Strategy:
    """Portfolio proportions through time.

    ``constant``: ``values`` has shape (d,). ``piecewise-constant``:
    ``values`` has shape (n_pieces, d) and ``breakpoints`` holds the
    n_pieces - 1 switching times. ``tabulated``: ``values`` has shape
    (n_steps, d) or (P, n_steps, d), one proportion per step.
    """

    kind: str
    values: np.ndarray
    breakpoints: tuple[float, ...] = ()

    @classmethod
    def constant(cls, pi: Sequence[float] | float) -> "Strategy":
        return cls("constant", np.atleast_1d(np.asarray(pi, dtype=float)))

    @classmethod
    def piecewise(cls, breakpoints: Sequence[float], values) -> "Strategy":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if len(breakpoints) != values.shape[0] - 1:
            raise ConfigurationError("piecewise strategy needs one fewer breakpoint than pieces")
        return cls("piecewise-constant", values, tuple(float(b) for b in breakpoints))

    @classmethod
    def tabulated(cls, values) -> "Strategy":
        return cls("tabulated", np.asarray(values, dtype=float))

    def on_grid(self, times: np.ndarray) -> np.ndarray:
        """Proportions applied on each step [t_k, t_{k+1}); shape (1|P, n_steps, d)."""
        starts = np.asarray(times)[:-1]
        if self.kind == "constant":
            return np.broadcast_to(self.values, (1, starts.size, self.values.size))
        if self.kind == "piecewise-constant":
            piece = np.searchsorted(np.asarray(self.breakpoints), starts, side="right")
            return self.values[piece][None]
        if self.kind == "tabulated":
            v = self.values
            if v.ndim == 2:
                v = v[None]
            if v.shape[1] != starts.size:
                raise GridMismatchError("tabulated strategy length does not match the time grid")
            return v
        raise ConfigurationError(f"unknown strategy kind {self.kind!r}")

    def mixed_with(self, other: "Strategy", weight: float, times: np.ndarray) -> "Strategy":
        """Convex combination of the two proportion schedules on ``times``."""
        return Strategy.tabulated(weight * self.on_grid(times) + (1.0 - weight) * other.on_grid(times))


@dataclass(frozen=True, eq=False)
class WealthPaths:
    initial_capital: float
    values: np.ndarray
    times: np.ndarray


def wealth_from_strategy(
    ensemble: PathEnsemble,
    strategy: Strategy,
    x0: float,
    constraint_set: ConstraintSet | None = None,
) -> WealthPaths:
    """Solve dX/X = r dt + pi.(dS/S - r 1 dt) pathwise by log-Euler stepping."""
    if not x0 > 0:
        raise ConstraintViolationError("initial capital must be positive")
    scen = ensemble.scenario
    cs = constraint_set or scen.constraint_set
    if not cs.admits_capital(x0):
        raise ConstraintViolationError(f"initial capital {x0} outside the test class (cap {cs.capital_cap})")
    pi = strategy.on_grid(ensemble.times)
    if pi.shape[-1] != scen.n_assets:
        raise ConstraintViolationError("strategy dimension does not match the number of assets")
    inside = cs.contains(pi)
    if not np.all(inside):
        step = int(np.argwhere(~inside)[0][1])
        raise ConstraintViolationError(
            f"proportion outside constraint set at time {ensemble.times[step]:.6g} (step {step})"
        )
    sigma = scen.sigma
    dt = scen.dt
    excess = scen.mu - scen.rate
    exposure = pi @ sigma  # (., n_steps, d): sigma^T pi per step
    drift = (scen.rate + pi @ excess - 0.5 * np.sum(exposure**2, axis=-1)) * dt
    shock = np.sum(exposure * ensemble.drivers, axis=-1)
    log_x = np.zeros((ensemble.n_paths, ensemble.n_steps + 1))
    np.cumsum(drift + shock, axis=1, out=log_x[:, 1:])
    values = x0 * np.exp(log_x)
    _check_finite(values, "wealth")
    values[:, 0] = x0
    return WealthPaths(initial_capital=float(x0), values=values, times=ensemble.times)


def deflate_by_numeraire(wealth: WealthPaths, numeraire) -> WealthPaths:
    """Pathwise X / Y. ``numeraire`` is a (P, n_times) array or WealthPaths."""
    y = numeraire.values if isinstance(numeraire, WealthPaths) else np.asarray(numeraire, dtype=float)
    if y.shape != wealth.values.shape:
        raise GridMismatchError(f"numeraire grid {y.shape} does not match wealth grid {wealth.values.shape}")
    if not np.all(y > 0):
        raise ConfigurationError("numeraire must be strictly positive")
    values = wealth.values / y
    return WealthPaths(initial_capital=float(values[0, 0]), values=values, times=wealth.times)
