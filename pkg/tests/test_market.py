import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scenario
from flowutil import (
    ConfigurationError,
    ConstraintSet,
    ConstraintViolationError,
    DriftTestSpec,
    GridMismatchError,
    MarketScenario,
    Strategy,
    TestClassSampler,
    conditional_drift_test,
    deflate_by_numeraire,
    simulate_drivers,
    state_price_density,
    wealth_from_strategy,
)


def mean_se(v):
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size))


def test_zero_volatility_is_rejected_and_tiny_volatility_is_flat():
    # a singular volatility violates the full-rank scenario invariant
    with pytest.raises(ConfigurationError):
        simulate_drivers(scenario(mu=0.0, sigma=0.0), 10, seed=1)
    ens = simulate_drivers(scenario(mu=0.0, sigma=1e-12), 50, seed=1)
    np.testing.assert_allclose(ens.asset_paths, 1.0, rtol=1e-10)
    np.testing.assert_allclose(ens.deflator_paths, 1.0, rtol=0, atol=0)


def test_driftless_asset_has_unit_mean():
    ens = simulate_drivers(scenario(mu=0.0, n_steps=4), 100_000, seed=2)
    m, se = mean_se(ens.asset_paths[:, -1, 0])
    assert abs(m - 1.0) <= 3 * se


def test_drifted_asset_matches_lognormal_mean():
    ens = simulate_drivers(scenario(mu=0.1, n_steps=4), 100_000, seed=3)
    m, se = mean_se(ens.asset_paths[:, -1, 0])
    assert abs(m - math.exp(0.1)) <= 3 * se


def test_reproducible_and_independent_of_path_count():
    a = simulate_drivers(scenario(), 300, seed=9)
    b = simulate_drivers(scenario(), 300, seed=9)
    c = simulate_drivers(scenario(), 5000, seed=9)
    assert a.asset_paths.tobytes() == b.asset_paths.tobytes()
    assert a.aux_martingales.tobytes() == b.aux_martingales.tobytes()
    np.testing.assert_array_equal(a.asset_paths, c.asset_paths[:300])
    assert not np.array_equal(a.asset_paths, simulate_drivers(scenario(), 300, seed=10).asset_paths)


def test_positivity():
    ens = simulate_drivers(scenario(sigma=0.6), 2000, seed=4)
    assert np.all(ens.asset_paths > 0) and np.all(ens.deflator_paths > 0) and np.all(ens.aux_martingales > 0)
    assert np.all(ens.deflator_paths[:, 0] == 1.0)


def test_scenario_validation():
    with pytest.raises(ConfigurationError):
        MarketScenario(horizon=0.0)
    with pytest.raises(ConfigurationError):
        MarketScenario(n_steps=0)
    with pytest.raises(ConfigurationError):
        ConstraintSet(lower=(1.0,), upper=(0.0,))
    singular = MarketScenario(n_assets=2, drift=(0.1, 0.1), volatility=((0.2, 0.2), (0.2, 0.2)),
                              initial_prices=(1.0, 1.0), constraint_set=ConstraintSet(lower=(0, 0), upper=(1, 1)))
    with pytest.raises(ConfigurationError):
        singular.market_price_of_risk()
    with pytest.raises(ConfigurationError):
        simulate_drivers(scenario(), 0, seed=1)


def test_zero_and_full_investment():
    ens = simulate_drivers(scenario(), 500, seed=5)
    zero = wealth_from_strategy(ens, Strategy.constant(0.0), 3.0)
    assert np.all(zero.values == 3.0)
    full = wealth_from_strategy(ens, Strategy.constant(1.0), 3.0)
    np.testing.assert_allclose(full.values, 3.0 * ens.asset_paths[:, :, 0], rtol=1e-12)


def test_half_investment_matches_exact_gbm():
    sigma, x0 = 0.2, 2.0
    ens = simulate_drivers(scenario(mu=0.0, sigma=sigma, n_steps=1000), 200, seed=6)
    w_t = ens.brownian()[:, -1, 0]
    exact = x0 * np.exp(0.5 * sigma * w_t - 0.5 * (0.5 * sigma) ** 2)
    got = wealth_from_strategy(ens, Strategy.constant(0.5), x0).values[:, -1]
    assert np.max(np.abs(got / exact - 1)) <= 1e-3


def test_constraint_violation_names_first_time():
    ens = simulate_drivers(scenario(n_steps=4), 10, seed=1)
    bad = Strategy.piecewise([0.5], [0.5, 1.5])
    with pytest.raises(ConstraintViolationError, match="time 0.5"):
        wealth_from_strategy(ens, bad, 1.0)
    with pytest.raises(ConstraintViolationError):
        wealth_from_strategy(ens, Strategy.constant(0.5), -1.0)


def test_piecewise_equals_composed_segments():
    ens = simulate_drivers(scenario(n_steps=3), 50, seed=7)
    pis = [0.2, 0.9, 0.5]
    piecewise = wealth_from_strategy(ens, Strategy.piecewise([1 / 3, 2 / 3], pis), 1.5).values
    brute = np.full(ens.n_paths, 1.5)
    for k, pi in enumerate(pis):
        seg = wealth_from_strategy(ens, Strategy.constant(pi), 1.0).values
        brute = brute * seg[:, k + 1] / seg[:, k]
        np.testing.assert_allclose(piecewise[:, k + 1], brute, rtol=1e-13)


def test_state_price_density():
    flat = simulate_drivers(scenario(mu=0.0), 100, seed=8)
    assert np.all(state_price_density(flat.scenario, flat) == 1.0)
    sc = scenario(mu=0.1, sigma=0.2, n_steps=4)
    assert sc.market_price_of_risk()[0] == pytest.approx(0.5)
    ens = simulate_drivers(sc, 100_000, seed=8)
    m, se = mean_se(ens.deflator_paths[:, -1])
    assert abs(m - 1.0) <= 3 * se
    x = wealth_from_strategy(ens, Strategy.constant(1.0), 2.0).values[:, -1]
    m, se = mean_se(ens.deflator_paths[:, -1] * x / 2.0)
    assert abs(m - 1.0) <= 3 * se


def test_rate_enters_as_discount():
    sc = scenario(mu=0.03, rate=0.03)
    ens = simulate_drivers(sc, 20, seed=1)
    np.testing.assert_allclose(ens.deflator_paths, np.exp(-0.03 * ens.times)[None, :].repeat(20, 0), rtol=1e-14)


def test_deflate_by_numeraire():
    ens = simulate_drivers(scenario(n_steps=4), 100_000, seed=12)
    w = wealth_from_strategy(ens, Strategy.constant(1.0), 2.0)
    same = deflate_by_numeraire(w, np.ones_like(w.values))
    assert same.values.tobytes() == w.values.tobytes()
    np.testing.assert_allclose(deflate_by_numeraire(w, w).values, 1.0, rtol=0, atol=0)
    growth = deflate_by_numeraire(w, 1.0 / ens.deflator_paths)
    m, se = mean_se(growth.values[:, -1])
    assert abs(m - 2.0) <= 3 * se
    with pytest.raises(GridMismatchError):
        deflate_by_numeraire(w, np.ones((3, 3)))


def test_deflated_test_wealths_are_supermartingales():
    ens = simulate_drivers(scenario(n_steps=8), 20_000, seed=13)
    spec = DriftTestSpec.default_pairs(ens.n_steps + 1, direction="supermartingale")
    sampler = TestClassSampler(ens.scenario.constraint_set, 8, seed=1)
    for name, w in sampler.wealths(ens, 1.0):
        deflated = w.values * ens.deflator_paths
        report = conditional_drift_test(deflated, spec, name, deflator=ens.deflator_paths)
        assert report.passed, (name, report.failures()[:3])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.05, 0.8), st.floats(0.01, 100.0))
def test_wealth_positive_and_starts_at_capital(pi, sigma, x0):
    ens = simulate_drivers(scenario(sigma=sigma, n_steps=8), 64, seed=1)
    w = wealth_from_strategy(ens, Strategy.constant(pi), x0)
    assert np.all(w.values > 0)
    assert np.all(w.values[:, 0] == x0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 5)), min_size=1, max_size=4))
def test_interior_point_is_admissible(bounds):
    lo = tuple(b[0] for b in bounds)
    hi = tuple(b[0] + b[1] for b in bounds)
    cs = ConstraintSet(lower=lo, upper=hi)
    assert cs.contains(cs.interior_point())
