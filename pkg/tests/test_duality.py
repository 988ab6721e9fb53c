import math

import numpy as np
import pytest

from conftest import scenario, single_path_linear, single_path_two_fund
from flowutil import (
    ConfigurationError,
    ConstraintSet,
    DualFlow,
    FlowGeneratorSpec,
    TestClassSampler,
    UnsupportedConfigurationError,
    build_dual_flow,
    build_flow_field,
    build_utility_field,
    darboux_bracket,
    default_grid,
    dual_suite,
    initial_utility,
    simulate_drivers,
)

U_HALF = initial_utility("power", gamma=0.5)


def test_constant_and_modulated_values():
    ens = simulate_drivers(scenario(), 100, seed=1)
    grid = default_grid()
    const = build_dual_flow("constant", U_HALF, ens, grid)
    assert np.all(const.evaluate(np.arange(100)[:, None], np.arange(17)[None, :], 4.0) == 0.5)
    _, mod = single_path_linear(1.21, z_t=0.9)
    assert mod.evaluate(0, 1, 4.0) == pytest.approx(0.45, rel=1e-15)
    built = build_dual_flow("modulated", U_HALF, ens, grid)
    np.testing.assert_allclose(built.values[:, :, 100], ens.aux_martingales[0] * U_HALF.marginal(grid[100]), rtol=1e-15)
    assert np.all(np.diff(built.values, axis=-1) < 0)
    np.testing.assert_allclose(built.values[:, 0, :], np.broadcast_to(U_HALF.marginal(grid), (100, grid.size)))


def test_dual_configuration_errors(linear_flow):
    ens = simulate_drivers(scenario(aux=()), 10, seed=1)
    with pytest.raises(ConfigurationError):
        build_dual_flow("modulated", U_HALF, ens, default_grid())
    with pytest.raises(ConfigurationError):
        build_dual_flow("lognormal", U_HALF, ens, default_grid())
    ens2 = simulate_drivers(scenario(), 10, seed=1)
    with pytest.raises(ConfigurationError, match="independent"):
        build_dual_flow("deflator", U_HALF, ens2, default_grid(), flow=type("F", (), {"sources": ("deflator",)})())


def test_modulated_dual_has_unit_mean_ratio(bs_ensemble_large):
    grid = default_grid(1e-3, 1e3, 13)
    dual = build_dual_flow("modulated", U_HALF, bs_ensemble_large, grid)
    ratio = dual.values[:, -1, :] / U_HALF.marginal(grid)
    se = ratio.std(axis=0, ddof=1) / math.sqrt(ratio.shape[0])
    assert np.all(np.abs(ratio.mean(axis=0) - 1.0) <= 3 * se)


def test_inverse_dual():
    _, mod = single_path_linear(1.21, z_t=0.9)
    assert mod.inverse(0, 1, 0.45) == pytest.approx(4.0, rel=1e-13)


def test_darboux_linear_closed_form():
    flow, dual = single_path_linear(1.21)
    for n in (4, 16, 64, 256, 1024):
        left, right = darboux_bracket(flow, dual, 1.0, n, 0, 1.0)
        assert right <= 2.42 <= left
    left, right = darboux_bracket(flow, dual, 1.0, 256, 0, 1.0)
    assert left - right <= 0.05
    l4, r4 = darboux_bracket(flow, dual, 1.0, 4096, 0, 1.0)
    assert 0.5 * (l4 + r4) == pytest.approx(2.42, rel=1e-4)


def test_darboux_gap_halves_and_orders_two_fund():
    flow = single_path_two_fund(1.3, 0.7)
    dual = DualFlow(flow.x_grid, "constant", U_HALF, np.ones((1, 2)))
    field = build_utility_field(flow, dual)
    target = float(field.evaluate(0, 1, flow.evaluate(0, 1, 1.0)))
    gaps = []
    for n in (8, 16, 32, 64, 128, 256):
        left, right = darboux_bracket(flow, dual, 1.0, n, 0, 1.0)
        assert right <= target <= left
        gaps.append(left - right)
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_dual_suite_constant_dual(linear_flow, bs_ensemble):
    field = build_utility_field(linear_flow, build_dual_flow("constant", U_HALF, bs_ensemble, linear_flow.x_grid))
    dual = build_dual_flow("constant", U_HALF, bs_ensemble, linear_flow.x_grid)
    sampler = TestClassSampler(bs_ensemble.scenario.constraint_set, 4, seed=1)
    report = dual_suite(linear_flow, dual, field, sampler, bs_ensemble, etas=(1.0,))
    assert report.passed, report.failures()[:5]
    equality = [c for c in report.cases if c.name.startswith("equality")]
    assert equality and all(c.passed for c in equality)
    # constant dual: Y*_t = Y(t, cal-X(0, eta)) is exactly kappa = u_x(eta)
    paths = np.arange(bs_ensemble.n_paths)[:, None]
    w = linear_flow.inverse(paths[:, 0], 0, np.ones(bs_ensemble.n_paths))
    y_star = dual.evaluate(paths, linear_flow.time_index[None, :], w[:, None])
    assert np.all(y_star == U_HALF.marginal(1.0))
    strict = [c for c in report.cases if c.name.startswith("strict")]
    assert strict and all(c.statistic > 3 * c.stderr for c in strict)


def test_dual_suite_modulated_closed_form(bs_ensemble_large):
    ens = bs_ensemble_large
    grid = default_grid(1e-2, 1e2, 41)
    flow = build_flow_field(FlowGeneratorSpec("linear", ("asset:0",)), grid, ens, np.array([0, 8, 16]))
    dual = build_dual_flow("modulated", U_HALF, ens, grid, flow=flow)
    field = build_utility_field(flow, dual)
    kappa = float(U_HALF.marginal(1.0))
    paths = np.arange(ens.n_paths)
    y_star = dual.evaluate(paths, 16, 1.0)
    conj = field.conjugate_rows(field.rows(paths, 2), y_star)
    # closed form: U~(T, y) = Z_T^2 M_T / y, so U~(T, Y*_T) = Z_T M_T / kappa with mean u~(kappa)
    m = ens.martingale("asset:0")[:, 16]
    np.testing.assert_allclose(conj, ens.aux_martingales[0][:, 16] * m / kappa, rtol=1e-9)
    se = conj.std(ddof=1) / math.sqrt(conj.size)
    assert abs(conj.mean() - U_HALF.conjugate(kappa)) <= 3 * se


def test_dual_suite_needs_cone(linear_flow, bs_ensemble):
    dual = build_dual_flow("constant", U_HALF, bs_ensemble, linear_flow.x_grid)
    field = build_utility_field(linear_flow, dual)
    box = TestClassSampler(ConstraintSet("box", (0.0,), (1.0,)), 4)
    with pytest.raises(UnsupportedConfigurationError):
        dual_suite(linear_flow, dual, field, box, bs_ensemble)
