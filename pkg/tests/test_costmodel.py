import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epivax import baseline as B
from epivax.costmodel import (
    CSV_HEADER,
    CostBreakdown,
    CostParams,
    accumulate_cost,
    expected_cost,
    instantaneous_cost,
)
from epivax.epimodel import (
    CompartmentState,
    IntegratorConfig,
    NoiseIntensities,
    Trajectory,
    constant_policy,
    deterministic_path,
    series_policy,
    simulate_ensemble,
)

CP = B.COSTS


def test_cost_free_state():
    x = CompartmentState(0.5, 0.4, 0, 0, 0, 0, 0.1, 0)
    assert instantaneous_cost(x, 0.0, CP).total == 0.0


def test_worked_example():
    x = CompartmentState(0.5, 0.4, 0.01, 0.002, 0.0001, 0.00001, 0.08, 0.0)
    c = instantaneous_cost(x, 0.01, CP)
    assert c.vaccination == pytest.approx(0.01, abs=1e-12)
    assert c.quarantine == pytest.approx(0.2, abs=1e-12)
    assert c.healthcare == pytest.approx(0.13, abs=1e-12)
    assert c.economic == pytest.approx(1.0, abs=1e-12)
    assert c.policy == pytest.approx(0.21, abs=1e-12)
    assert c.total == pytest.approx(1.34, abs=1e-12)


def test_doubling_alpha_quadruples_vaccination_only():
    a, b = instantaneous_cost(B.TRAIN_START, 0.01, CP), instantaneous_cost(B.TRAIN_START, 0.02, CP)
    assert b.vaccination == pytest.approx(4 * a.vaccination, rel=1e-14)
    assert (b.quarantine, b.healthcare, b.economic) == (a.quarantine, a.healthcare, a.economic)


def test_negative_alpha_rejected():
    with pytest.raises(ValueError):
        instantaneous_cost(B.TRAIN_START, -1e-3, CP)


@pytest.mark.parametrize("field,val", [("c1", -1.0), ("psi", 1.5), ("c3", float("nan"))])
def test_cost_params_validation(field, val):
    with pytest.raises(ValueError):
        CostParams(**{**CP.to_dict(), field: val})


def test_zero_horizon_is_zero():
    tr = Trajectory(B.TRAIN_START.to_array()[None, :], np.zeros(0))
    assert accumulate_cost(tr, CP).total == 0.0


def test_constant_integrand():
    x = B.TRAIN_START.to_array()
    tr = Trajectory(np.tile(x, (11, 1)), np.full(10, 0.01), 1.0)
    got = accumulate_cost(tr, CP).as_array()
    np.testing.assert_allclose(got, 10 * instantaneous_cost(B.TRAIN_START, 0.01, CP).as_array(), rtol=1e-13)


def test_left_endpoint_rule_ignores_final_state():
    cfg = IntegratorConfig(0.5, 3)
    tr = deterministic_path(B.TRAIN_START, constant_policy(0.01), B.PARAMS, cfg)
    ref = sum((instantaneous_cost(tr.state(n), 0.01, CP) for n in range(6)), CostBreakdown()).scale(0.5)
    np.testing.assert_allclose(accumulate_cost(tr, CP).as_array(), ref.as_array(), rtol=1e-13)


def test_additivity_over_concatenation():
    cfg = IntegratorConfig(1.0, 20)
    tr = deterministic_path(B.TRAIN_START, constant_policy(0.015), B.PARAMS, cfg)
    a = Trajectory(tr.states[:9], tr.alphas[:8])
    b = Trajectory(tr.states[8:], tr.alphas[8:])
    np.testing.assert_allclose((accumulate_cost(a, CP) + accumulate_cost(b, CP)).as_array(),
                               accumulate_cost(tr, CP).as_array(), rtol=1e-13)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0, 0.2), min_size=8, max_size=8),
    st.integers(2, 5),
    st.floats(0, 0.1),
    st.floats(0, 0.1),
)
def test_monotone_in_infected(x, k, bump, a):
    x = np.array(x)
    y = x.copy()
    y[k] += bump
    assert instantaneous_cost(y, a, CP).total >= instantaneous_cost(x, a, CP).total


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 100))
def test_uniform_scaling(k):
    c = instantaneous_cost(B.TRAIN_START, 0.02, CP)
    s = instantaneous_cost(B.TRAIN_START, 0.02, CP.scaled(k))
    np.testing.assert_allclose(s.as_array(), k * c.as_array(), rtol=1e-12)


def _argmin_two_step(cp):
    grid = np.linspace(0, 0.05, 21)
    cfg = IntegratorConfig(1.0, 2)
    best, arg = np.inf, None
    for a0, a1 in itertools.product(grid, grid):
        tr = deterministic_path(B.TRAIN_START, series_policy([a0, a1]), B.PARAMS, cfg)
        tot = accumulate_cost(tr, cp).total
        if tot < best:
            best, arg = tot, (a0, a1)
    return arg


def test_argmin_invariant_under_scaling():
    # heavier infection weights make the trade-off non-trivial
    cp = CostParams(c1=1.0, c2=20, c3=50, c4=200, c5=1000, c6=100, psi=0.5)
    assert _argmin_two_step(cp) == _argmin_two_step(cp.scaled(7.5))


def test_expected_cost_single_and_identical():
    b = CostBreakdown(1.0, 2.0, 3.0, 4.0)
    one = expected_cost([b])
    assert one.mean == b and one.stderr.total == 0.0 and one.total_stderr == 0.0
    many = expected_cost([b] * 5)
    assert many.mean == b and not many.stderr.as_array().any()


def test_expected_cost_standard_error():
    rows = [CostBreakdown(v, 0, 0, 0) for v in (1.0, 2.0, 3.0, 6.0)]
    e = expected_cost(rows)
    assert e.mean.vaccination == 3.0
    assert e.stderr.vaccination == pytest.approx(np.std([1, 2, 3, 6], ddof=1) / 2)


def test_zero_noise_ensemble_matches_deterministic():
    cfg = IntegratorConfig(1.0, 60)
    pol = constant_policy(0.01)
    ens = simulate_ensemble(B.TRAIN_START, pol, B.PARAMS, NoiseIntensities.zero(), cfg, 500, 9)
    per = [accumulate_cost(Trajectory(s, a), CP) for s, a in zip(ens.states, ens.alphas)]
    det = accumulate_cost(deterministic_path(B.TRAIN_START, pol, B.PARAMS, cfg), CP)
    np.testing.assert_allclose(expected_cost(per).mean.as_array(), det.as_array(), rtol=1e-12)


def test_csv_row():
    b = CostBreakdown(0.5, 0.25, 2.0, 3.0)
    assert CSV_HEADER == ("strategy", "policy_cost", "healthcare_cost", "economic_cost", "total")
    assert b.csv_row("zero") == ["zero", "0.75", "2", "3", "5.75"]
