import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epivax import baseline as B
from epivax.calibrate import (
    THETA_NAMES,
    Z_NAMES,
    CalibrationConfig,
    CalibrationDivergence,
    TimeGrid,
    constrain_to_grid,
    data_loss,
    default_centers,
    estimate_from_json,
    fit_deterministic,
    fit_metrics,
    fit_stochastic,
    mc_increments,
    predict,
    residual_loss_det,
    residual_loss_sto,
    synthetic_series,
)
from epivax.epimodel import NoiseIntensities
from epivax.ingest import CompartmentSeries
from epivax.nnkit import DenseNetwork
from epivax.nnkit import autodiff as ad

THETA = {
    "beta1": 0.28120, "beta2": 0.15838, "beta3": 0.03880, "sigma_vacc": 0.06352, "gamma": 0.30954,
    "delta1": 0.28505, "delta2": 0.28269, "delta3": 0.14206, "p1": 0.0040, "p2": 0.14310, "mu": 0.00420,
}
LAM, ZETA = 0.000053, 0.000033


def oracle_rhs(x, a, th=THETA, L=LAM, z=ZETA):
    """Independent transcription of the model right-hand side with constant p1."""
    S, V, E, I1, I2, I3, R, D = x
    lam = th["beta1"] * I1 + th["beta2"] * I2 + th["beta3"] * I3
    return np.array([
        L - lam * S - a * S - z * S,
        a * S - th["sigma_vacc"] * lam * V - z * V,
        lam * S + th["sigma_vacc"] * lam * V - th["gamma"] * E - z * E,
        th["gamma"] * E - th["delta1"] * I1 - th["p1"] * I1 - z * I1,
        th["p1"] * I1 - th["delta2"] * I2 - th["p2"] * I2 - z * I2,
        th["p2"] * I2 - th["delta3"] * I3 - th["mu"] * I3 - z * I3,
        th["delta1"] * I1 + th["delta2"] * I2 + th["delta3"] * I3 - z * R,
        th["mu"] * I3,
    ])


def oracle_net(net, u):
    """Value and d/du of a tanh MLP with sigmoid output, by hand."""
    h, dh = np.array([u]), np.array([1.0])
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z, dz = w @ h + b, w @ dh
        if k < len(net.weights) - 1:
            h = np.tanh(z)
            dh = (1 - h**2) * dz
        else:
            s = 1 / (1 + np.exp(-z))
            h, dh = s, s * (1 - s) * dz
    return h, dh


def small_net(seed=3, hidden=(6, 6)):
    return DenseNetwork.init([1, *hidden, 8], np.random.default_rng(seed), hidden="tanh", output="sigmoid")


# ---- grid constraint ----

def test_grid_center_at_zero():
    assert constrain_to_grid(0.0, 0.28, 0.5) == pytest.approx(0.28, abs=1e-15)


def test_grid_worked_example():
    # 0.14 + 0.28 * sigmoid(1) = 0.3446964, quoted to six places as 0.344697
    assert constrain_to_grid(1.0, 0.28, 0.5) == pytest.approx(0.344697, abs=1e-6)


def test_grid_saturation():
    assert constrain_to_grid(50.0, 0.28, 0.5) == pytest.approx(0.42)
    assert constrain_to_grid(-50.0, 0.28, 0.5) == pytest.approx(0.14)


@given(st.floats(-30, 30), st.floats(1e-4, 10), st.floats(0.01, 1.0))
def test_grid_interval_property(raw, c, g):
    v = constrain_to_grid(raw, c, g)
    assert c * (1 - g) - 1e-12 <= v <= c * (1 + g) + 1e-12


def test_grid_node_matches_array():
    raw = np.array([-1.0, 0.3, 2.0])
    c = np.array([0.1, 0.2, 0.3])
    node = constrain_to_grid(ad.parameter(raw), c, 0.5)
    np.testing.assert_allclose(node.value, constrain_to_grid(raw, c, 0.5), rtol=0, atol=1e-15)


# ---- data loss ----

def test_data_loss_examples():
    obs = np.zeros((1, 8))
    assert data_loss(obs.copy(), obs) == 0.0
    pred = obs.copy()
    pred[0, 3] = 1.0
    assert data_loss(pred, obs) == 1.0
    pred2 = np.zeros((2, 8))
    pred2[0, 0], pred2[1, 7] = 0.1, 0.2
    assert data_loss(pred2, np.zeros((2, 8))) == pytest.approx(0.025, abs=1e-15)


def test_data_loss_shape_mismatch():
    with pytest.raises(ValueError):
        data_loss(np.zeros((2, 8)), np.zeros((3, 8)))


# ---- deterministic residual ----

def test_residual_det_disease_free_constant_is_zero():
    # zero weights in the output layer: sigmoid(b) constant; choose b to give S=1 (scaled), rest ~0
    net = small_net()
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    ws[-1][:] = 0.0
    bs[-1][:] = -40.0
    bs[-1][0] = 0.0  # S = scale * 0.5
    net = net.with_params([v for pair in zip(ws, bs) for v in pair])
    grid = TimeGrid.of(np.arange(10.0))
    scale = np.array([2.0] + [1.0] * 7)
    th = dict(THETA)
    loss = residual_loss_det(net, grid, th, np.zeros(10), 0.0, 0.0, scale)
    assert float(loss.value) < 1e-30


def test_rhs_balances_exponential_decay():
    # S(t) = S0 exp(-a t) solves dS = -a S with infection and vital terms off
    a, s0 = 0.02, 0.6
    t = np.linspace(0, 30, 16)
    grid = TimeGrid.of(t)
    y = s0 * np.exp(-a * t)
    dy = -a * y
    cols = [ad.constant(y)] + [ad.constant(np.zeros_like(t)) for _ in range(7)]
    from epivax.epimodel import rates

    f = rates(cols, np.full_like(t, a), 0.0, 0.0, 0.0, *(0.0,) * 10)
    assert np.max(np.abs(f[0].value - dy)) < 1e-15
    assert grid.d_input == pytest.approx(2 / 30)


def test_residual_det_matches_independent_oracle():
    net = small_net(seed=11)
    t = np.arange(0.0, 12.0)
    grid = TimeGrid.of(t)
    scale = np.array([1.2, 0.9, 0.03, 0.004, 3e-4, 5e-5, 0.01, 4e-4])
    alpha = np.linspace(0.02, 0.013, len(t))
    got = float(residual_loss_det(net, grid, THETA, alpha, LAM, ZETA, scale).value)
    rows = []
    for i, ti in enumerate(t):
        u = 2 * (ti - t[0]) / (t[-1] - t[0]) - 1
        y, dy_du = oracle_net(net, u)
        x = y * scale
        dx = dy_du * (2 / (t[-1] - t[0])) * scale
        rows.append(np.sum((oracle_rhs(x, alpha[i]) - dx) ** 2))
    assert got == pytest.approx(np.mean(rows), rel=1e-10, abs=1e-16)


# ---- stochastic residual ----

def test_residual_sto_zero_noise_exact_recurrence():
    # feed states that satisfy the Euler recurrence exactly
    x = [B.TRAIN_START.to_array()]
    for _ in range(4):
        x.append(x[-1] + oracle_rhs(x[-1], 0.015))
    X = ad.constant(np.array(x))
    grid = TimeGrid.of(np.arange(5.0))
    loss = residual_loss_sto(None, grid, THETA, np.zeros(8), np.full(5, 0.015), LAM, ZETA, 3, 1.0, 0, X=X)
    assert float(loss.value) < 1e-30


def test_residual_sto_hand_trace():
    X = np.array([[0.55, 0.43, 0.01, 0.002, 8e-5, 1e-5, 0.004, 1e-4],
                  [0.54, 0.44, 0.011, 0.0021, 7e-5, 1.2e-5, 0.0045, 1.1e-4]])
    z = np.full(8, 0.06)
    grid = TimeGrid.of([0.0, 1.0])
    got = float(residual_loss_sto(None, grid, THETA, z, np.array([0.02, 0.02]), LAM, ZETA, 2, 1.0, 5,
                                  epoch=3, X=ad.constant(X)).value)
    total = 0.0
    for j in range(2):
        dW = np.random.default_rng([5, 1, 3, j]).standard_normal((1, 8))[0]
        pred = X[0] + oracle_rhs(X[0], 0.02) + X[0] * z * dW
        total += np.sum((pred - X[1]) ** 2)
    assert got == pytest.approx(total / 2, rel=1e-10)


def test_residual_sto_deterministic_in_seed():
    net = small_net()
    grid = TimeGrid.of(np.arange(6.0))
    args = (net, grid, THETA, np.full(8, 0.06), np.full(6, 0.02), LAM, ZETA, 1, 1.0, 9)
    assert float(residual_loss_sto(*args).value) == float(residual_loss_sto(*args).value)
    assert np.array_equal(mc_increments(1, 2, 3, (4, 8)), mc_increments(1, 2, 3, (4, 8)))


def test_residual_sto_needs_two_dates():
    with pytest.raises(ValueError):
        residual_loss_sto(None, TimeGrid.of([0.0]), THETA, np.zeros(8), np.zeros(1), LAM, ZETA, 1, 1.0, 0,
                          X=ad.constant(np.ones((1, 8))))


# ---- fitting ----

@pytest.fixture(scope="module")
def synth():
    alpha = np.linspace(0.02, 0.013, 21)
    return synthetic_series(B.PARAMS.with_constant_p1(0.004), B.TRAIN_START, alpha, substeps=4)


def test_config_validation_and_paper_mode():
    with pytest.raises(ValueError):
        CalibrationConfig(epochs=-1)
    with pytest.raises(ValueError):
        CalibrationConfig(grid=1.5)
    with pytest.raises(ValueError):
        CalibrationConfig(n_mc=0)
    p = CalibrationConfig.paper()
    assert (p.epochs, p.lr, p.n_mc, p.grid, p.augment) == (100000, 1e-6, 5, 0.5, 5)
    assert p.hidden == (128, 128, 128, 128)


def test_zero_epochs_returns_centres(synth):
    cfg = CalibrationConfig(epochs=0, hidden=(4,))
    est = fit_deterministic(synth, cfg)
    c = default_centers()
    for k in THETA_NAMES:
        assert est.values[k] == pytest.approx(c[k], rel=1e-12)


def test_loss_decomposition_and_decrease(synth):
    cfg = CalibrationConfig(epochs=300, lr=3e-3, hidden=(8, 8), lambda_data=1.0, lambda_de=0.7)
    est = fit_deterministic(synth, cfg)
    h = est.history
    np.testing.assert_allclose(h[:, 1], h[:, 2] + 0.7 * h[:, 3], rtol=0, atol=1e-12)
    assert h[-1, 1] <= h[0, 1]
    assert np.array_equal(h[:, 0], np.arange(301))


def test_parameters_stay_inside_grid(synth):
    cfg = CalibrationConfig(epochs=200, lr=5e-2, hidden=(8,), grid=0.3)
    est = fit_stochastic(synth, cfg)
    for k, c in est.centers.items():
        assert c * 0.7 - 1e-12 <= est.values[k] <= c * 1.3 + 1e-12
    assert est.z is not None and len(est.z.sigmas) == 8


def test_gradient_reaches_grid_parameters(synth):
    seen = []
    cfg = CalibrationConfig(epochs=1, lr=1e-2, hidden=(8,))
    est = fit_deterministic(synth, cfg, callback=lambda e, v: seen.append(v))
    moved = [k for k in THETA_NAMES if est.values[k] != pytest.approx(default_centers()[k], rel=1e-14)]
    assert len(moved) == len(THETA_NAMES)
    assert len(seen) == 2


def test_same_seed_identical_estimates(synth):
    cfg = CalibrationConfig(epochs=30, hidden=(6,), n_mc=2)
    a, b = fit_stochastic(synth, cfg), fit_stochastic(synth, cfg)
    assert a.values == b.values
    assert np.array_equal(a.history, b.history)


def test_divergence_reports_epoch(synth):
    bad = CompartmentSeries(synth.dates, synth.states * np.nan, synth.alpha, 1.0, t=synth.t)
    with pytest.raises(CalibrationDivergence) as err:
        fit_deterministic(bad, CalibrationConfig(epochs=5, hidden=(4,)))
    assert err.value.epoch == 0


def test_estimate_json_round_trip(tmp_path, synth):
    est = fit_stochastic(synth, CalibrationConfig(epochs=3, hidden=(4,)))
    est.save(tmp_path / "est.json", tmp_path / "hist.csv")
    doc = json.loads((tmp_path / "est.json").read_text())
    assert set(doc) >= {"theta", "z", "loss_history_path", "config"}
    assert doc["loss_history_path"] == "hist.csv"
    assert (tmp_path / "hist.csv").read_text().splitlines()[0] == "epoch,total,data,residual"
    theta, z = estimate_from_json(doc)
    assert theta.beta1 == pytest.approx(est.values["beta1"])
    assert z.sigmas == tuple(est.values[k] for k in Z_NAMES)


# ---- metrics ----

def test_fit_metrics_examples():
    obs = np.random.default_rng(0).random((7, 8))
    assert fit_metrics(obs, obs) == (fit_metrics(obs, obs).__class__(0.0, 0.0))
    pred = obs.copy()
    pred[:, 2] += 0.01
    m = fit_metrics(pred, obs)
    assert m.mse == pytest.approx(0.01**2 / 8, rel=1e-9)
    assert m.mae == pytest.approx(0.01 / 8, rel=1e-9)


def test_predict_deterministic_matches_generator(synth):
    theta = B.PARAMS.with_constant_p1(0.004)
    coarse = synthetic_series(theta, synth.states[0], synth.alpha)
    pred = predict(theta, None, coarse)
    np.testing.assert_allclose(pred, coarse.states, rtol=0, atol=1e-15)


def test_predict_zero_noise_uses_ode(synth):
    theta = B.PARAMS.with_constant_p1(0.004)
    a = predict(theta, NoiseIntensities.zero(), synth)
    b = predict(theta, None, synth)
    assert np.array_equal(a, b)
    assert math.isfinite(fit_metrics(a, synth.states).mse)
