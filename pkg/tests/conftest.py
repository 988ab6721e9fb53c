import numpy as np
import pytest

from flowutil import (
    ConstraintSet,
    DualFlow,
    FlowField,
    FlowGeneratorSpec,
    MarketScenario,
    build_flow_field,
    default_grid,
    initial_utility,
    simulate_drivers,
)


def scenario(mu=0.1, sigma=0.2, n_steps=16, kind="box", upper=1.0, aux=(0.2,), horizon=1.0, rate=0.0):
    return MarketScenario(
        n_assets=1,
        drift=(mu,),
        volatility=((sigma,),),
        rate=rate,
        horizon=horizon,
        n_steps=n_steps,
        constraint_set=ConstraintSet(kind=kind, lower=(0.0,), upper=(upper,)),
        aux_volatility=aux,
    )


def two_asset_scenario(n_steps=16, kind="cone"):
    return MarketScenario(
        n_assets=2,
        drift=(0.08, 0.05),
        volatility=((0.2, 0.0), (0.0, 0.25)),
        horizon=1.0,
        n_steps=n_steps,
        constraint_set=ConstraintSet(kind=kind, lower=(0.0, 0.0), upper=(1.0, 1.0)),
        initial_prices=(1.0, 1.0),
        aux_volatility=(0.3,),
    )


def single_path_linear(m_t, grid=None, z_t=None, gamma=0.5):
    """One path, times (0, 1): X*_1(x) = m_t x, dual Z_1 u_x(x)."""
    g = default_grid() if grid is None else grid
    values = np.stack([g, m_t * g])[None]
    flow = FlowField(g, np.array([0.0, 1.0]), np.array([0, 1]), values, "linear[test]")
    u = initial_utility("power", gamma=gamma)
    if z_t is None:
        dual = DualFlow(g, "constant", u, np.ones((1, 2)))
    else:
        dual = DualFlow(g, "modulated", u, np.array([[1.0, z_t]]), channel="aux:0")
    return flow, dual


def single_path_two_fund(m1, m2, grid=None):
    g = default_grid() if grid is None else grid
    t1 = m1 * g * g / (1 + g) + m2 * g / (1 + g)
    values = np.stack([g, t1])[None]
    return FlowField(g, np.array([0.0, 1.0]), np.array([0, 1]), values, "two-fund[test]")


@pytest.fixture(scope="session")
def bs_ensemble_large():
    """Black-Scholes mu=0.1, sigma=0.2 at 10^5 paths on 16 steps (shared by the Monte-Carlo checks)."""
    return simulate_drivers(scenario(kind="cone"), 100_000, seed=11)


@pytest.fixture(scope="session")
def bs_ensemble():
    return simulate_drivers(scenario(kind="cone"), 20_000, seed=5)


@pytest.fixture(scope="session")
def linear_flow(bs_ensemble):
    return build_flow_field(FlowGeneratorSpec("linear", ("asset:0",)), default_grid(1e-3, 1e3, 61), bs_ensemble, np.arange(0, 17, 4))


@pytest.fixture(scope="session")
def small_ensemble():
    return simulate_drivers(scenario(kind="cone"), 300, seed=6)


@pytest.fixture(scope="session")
def small_linear_flow(small_ensemble):
    return build_flow_field(FlowGeneratorSpec("linear", ("asset:0",)), default_grid(1e-3, 1e3, 61), small_ensemble, np.arange(0, 17, 4))
