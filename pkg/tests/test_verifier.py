import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scenario
from flowutil import (
    ConstraintSet,
    DriftTestSpec,
    SpecError,
    Strategy,
    TestClassSampler,
    TestReport,
    UnsupportedConfigurationError,
    UtilityField,
    FlowGeneratorSpec,
    build_dual_flow,
    build_flow_field,
    build_utility_field,
    conditional_drift_test,
    consistency_suite,
    default_grid,
    initial_utility,
    oc_check,
    shape_audit,
    simulate_drivers,
)
from flowutil.verifier import judge, paired_comparison

U_HALF = initial_utility("power", gamma=0.5)


@pytest.fixture(scope="module")
def driftless():
    return simulate_drivers(scenario(mu=0.0, sigma=0.2, n_steps=4), 100_000, seed=31)


def test_constant_process_passes_with_zero_statistic():
    v = np.full((2000, 5), 3.0)
    report = conditional_drift_test(v, DriftTestSpec.default_pairs(5))
    assert report.passed
    assert all(c.statistic == 0.0 for c in report.cases)


def test_exponential_brownian_is_detected_as_submartingale(driftless):
    w = driftless.brownian()[:, :, 0]
    v = np.exp(0.2 * w)
    report = conditional_drift_test(v, DriftTestSpec.default_pairs(5))
    assert not report.passed
    assert all(c.statistic > 0 for c in report.failures())
    assert conditional_drift_test(v, DriftTestSpec.default_pairs(5, direction="submartingale")).passed


def test_exponential_martingale_passes(driftless):
    w = driftless.brownian()[:, :, 0]
    v = np.exp(0.2 * w - 0.02 * driftless.times)
    assert conditional_drift_test(v, DriftTestSpec.default_pairs(5)).passed


def test_injected_drift_of_five_se_is_detected(driftless):
    m = driftless.asset_paths[:, :, 0]
    spec = DriftTestSpec(pairs=((0, 4),), features=("const",))
    base = conditional_drift_test(m, spec).cases[0]
    shifted = m + 5.0 * base.stderr * (driftless.times / driftless.times[-1])
    assert not conditional_drift_test(shifted, spec).passed
    assert not conditional_drift_test(shifted, spec.with_direction("supermartingale")).passed


def test_spec_validation():
    with pytest.raises(SpecError):
        DriftTestSpec(pairs=((2, 1),))
    with pytest.raises(SpecError):
        DriftTestSpec(pairs=())
    with pytest.raises(SpecError):
        DriftTestSpec(pairs=((0, 1),), direction="sideways")
    assert DriftTestSpec(pairs=((0, 1),), features=("bins4",)).features[0] == "const"
    with pytest.raises(SpecError, match="at least"):
        conditional_drift_test(np.ones((10, 2)), DriftTestSpec(pairs=((0, 1),)))
    v = np.random.default_rng(0).normal(size=(2000, 2))
    with pytest.raises(SpecError, match="identically zero"):
        conditional_drift_test(v, DriftTestSpec(pairs=((0, 1),), features=("const", "flag")), features={"flag": np.zeros((2000, 2))})
    with pytest.raises(SpecError, match="nonnegative"):
        conditional_drift_test(v, DriftTestSpec(pairs=((0, 1),), features=("const", "neg")), features={"neg": -np.ones((2000, 2))})


def test_heavy_tail_warning():
    v = np.zeros((2000, 2))
    v[:, 1] = np.random.default_rng(1).normal(size=2000) * 1e-3
    v[17, 1] = 50.0
    case = conditional_drift_test(v, DriftTestSpec(pairs=((0, 1),), features=("const",))).cases[0]
    assert case.warning and "heavy tail" in case.warning


def test_judge_directions():
    assert judge(2.9, 1.0, "supermartingale") == "pass"
    assert judge(3.1, 1.0, "supermartingale") == "fail"
    assert judge(-100.0, 1.0, "supermartingale") == "pass"
    assert judge(-3.1, 1.0, "submartingale") == "fail"
    assert judge(-3.1, 1.0, "martingale") == "fail"
    assert judge(float("nan"), 1.0, "martingale") == "fail"
    assert judge(3.5, 1.0, "martingale", atol=1.0) == "pass"


def test_paired_comparison():
    rng = np.random.default_rng(2)
    base = rng.normal(size=5000)
    assert paired_comparison("eq", base, base).passed
    assert paired_comparison("gain", base, base + 1.0, strict=True).passed
    assert not paired_comparison("loss", base + 1.0, base).passed


def test_sampler_is_deterministic_and_in_class():
    cs = ConstraintSet("box", (0.0, 0.0), (1.0, 0.5))
    times = np.linspace(0, 1, 17)
    a = TestClassSampler(cs, 8, seed=3).strategies(times)
    b = TestClassSampler(cs, 8, seed=3).strategies(times)
    assert [n for n, _ in a] == [n for n, _ in b]
    assert len(a) == 8
    assert any(n.startswith("mix") for n, _ in a) and any(n.startswith("piecewise") for n, _ in a)
    for (_, s), (_, t) in zip(a, b):
        np.testing.assert_array_equal(s.on_grid(times), t.on_grid(times))
        assert np.all(cs.contains(s.on_grid(times)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_sampler_stays_in_cone(seed, n):
    cs = ConstraintSet("cone", (0.0,), (float("inf"),))
    times = np.linspace(0, 1, 9)
    for _, s in TestClassSampler(cs, n, seed=seed).strategies(times):
        assert np.all(cs.contains(s.on_grid(times)))


def test_report_roundtrip():
    r = TestReport("demo", seed=1, scenario_hash="abc", n_paths=10)
    r.cases.append(conditional_drift_test(np.ones((1000, 2)), DriftTestSpec(pairs=((0, 1),))).cases[0])
    doc = json.loads(r.to_json())
    assert doc["verdict"] == "pass" and doc["cases"][0]["name"].startswith("V[0->1]")
    assert TestReport.from_dict(doc).to_json() == r.to_json()
    assert r.to_csv().splitlines()[0].startswith("suite,")


@pytest.fixture(scope="module")
def linear_setup(linear_flow, bs_ensemble):
    dual = build_dual_flow("constant", U_HALF, bs_ensemble, linear_flow.x_grid)
    return linear_flow, dual, build_utility_field(linear_flow, dual), bs_ensemble


def test_consistency_optimum_in_class(linear_setup):
    flow, _, field, ens = linear_setup
    # pi = 1 deflated is exactly X*, so every branch compares X* with itself
    sampler = TestClassSampler(ens.scenario.constraint_set, 1, seed=0)
    report = consistency_suite(field, sampler, flow, ens, x0s=(1.0,))
    assert report.passed, report.failures()[:3]
    test_cases = {c.name.split("[", 1)[1]: c for c in report.cases if c.name.startswith("U(X)[")}
    opt_cases = {c.name.split("[", 1)[1].replace("x=1]", "const-upper,x=1]"): c for c in report.cases if c.name.startswith("U(X*)[")}
    for key, case in opt_cases.items():
        assert test_cases[key].statistic == pytest.approx(case.statistic, rel=1e-12, abs=1e-15)
    dom = [c for c in report.cases if c.name.startswith("dominance")]
    assert dom and all(abs(c.statistic) <= 1e-12 for c in dom)


def test_consistency_terminal_mean(linear_setup):
    flow, _, field, ens = linear_setup
    paths = np.arange(ens.n_paths)
    vals = field.evaluate(paths, flow.n_times - 1, flow.evaluate(paths, flow.n_times - 1, 4.0))
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 4.0) <= 3 * se


def test_buy_and_hold_cash_has_negative_drift(bs_ensemble_large):
    ens = bs_ensemble_large
    flow = build_flow_field(FlowGeneratorSpec("linear", ("asset:0",)), default_grid(1e-2, 1e2, 41), ens, np.array([0, 16]))
    field = build_utility_field(flow, build_dual_flow("constant", U_HALF, ens, flow.x_grid))
    sampler = TestClassSampler(ens.scenario.constraint_set, 1, seed=0, include=(Strategy.constant(0.0),))
    report = consistency_suite(field, sampler, flow, ens, x0s=(1.0,), branches=("test-class",))
    assert report.passed
    const = [c for c in report.cases if c.name.startswith("U(X)[given0") and c.name.endswith(":const")]
    # closed form: E U(T, M_T) = 2 exp(-T/200) < 2 = U(0, 1)
    assert const and const[0].statistic < 0


def test_oc_check_constant_dual(linear_setup):
    flow, dual, _, ens = linear_setup
    sampler = TestClassSampler(ens.scenario.constraint_set, 3, seed=0)
    report = oc_check(flow, dual, sampler, ens, xs=(0.5, 1.0), x_primes=(0.5, 1.0))
    assert report.passed, report.failures()[:3]
    assert "open_question" in report.meta
    zero = [c for c in report.cases if c.name.startswith("(X-X*)Y[const-upper,x=1,x'=1]")]
    # X = X* up to floating-point roundoff (the two are computed along different paths)
    assert zero and all(abs(c.statistic) <= 1e-15 and c.passed for c in zero)


def test_oc_check_detects_drifted_dual(linear_setup):
    flow, _, _, ens = linear_setup
    broken = build_dual_flow("drifted", U_HALF, ens, flow.x_grid, drift=0.1)
    sampler = TestClassSampler(ens.scenario.constraint_set, 2, seed=0)
    report = oc_check(flow, broken, sampler, ens, xs=(1.0,), x_primes=(1.0,), branches=("optimum",))
    assert not report.passed
    assert all(c.statistic > 0 for c in report.failures())


def test_oc_check_needs_cone_for_homogeneous_branches(linear_setup):
    flow, dual, _, ens = linear_setup
    box = TestClassSampler(ConstraintSet("box", (0.0,), (1.0,)), 2)
    with pytest.raises(UnsupportedConfigurationError):
        oc_check(flow, dual, box, ens)
    assert oc_check(flow, dual, box, ens, xs=(1.0,), x_primes=(1.0,), branches=("difference",)).cases


def test_shape_audit_controls(small_linear_flow, small_ensemble):
    dual = build_dual_flow("constant", U_HALF, small_ensemble, small_linear_flow.x_grid)
    field = build_utility_field(small_linear_flow, dual)
    assert shape_audit(field).passed

    u = field.U_values.copy()
    u[3, 2, 30] -= 0.05 * (u[3, 2, 31] - u[3, 2, 29])
    bumped = UtilityField.from_arrays(field.x_grid, field.times, field.time_index, u, field.Ux_values)
    report = shape_audit(bumped)
    conc = next(c for c in report.cases if c.name == "concavity")
    assert conc.verdict == "fail" and "path=3 time=2" in conc.warning

    g = field.x_grid
    lin = np.broadcast_to(g, (2, 2, g.size))
    linear = UtilityField.from_arrays(g, np.array([0.0, 1.0]), np.array([0, 1]), lin, np.ones_like(lin))
    verdicts = {c.name: c.verdict for c in shape_audit(linear).cases}
    assert verdicts["strict-increase"] == "pass"
    assert verdicts["strict-concavity"] == "fail"
