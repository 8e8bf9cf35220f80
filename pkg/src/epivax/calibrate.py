"""Physics-informed network calibration of the epidemic (and noise) parameters.

A network maps time to the eight compartment proportions. Its data misfit and
its violation of the model equations are minimised jointly over the network
weights and the grid-constrained parameters. The deterministic residual uses
the time derivative of the network (forward tangent); the stochastic residual
compares one-step Euler-Maruyama predictions with the next network output,
averaged over Monte Carlo draws.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import baseline as B
from .epimodel import (
    EpidemicParams,
    HospitalizationLink,
    IntegratorConfig,
    NoiseIntensities,
    deterministic_path,
    rates,
    series_policy,
    simulate_ensemble,
)
from .ingest import CompartmentSeries, augment_cubic_spline
from .nnkit import AdamState, DenseNetwork, NonFiniteGradientError, adam_step, backward
from .nnkit import autodiff as ad

THETA_NAMES = ("beta1", "beta2", "beta3", "sigma_vacc", "gamma", "delta1", "delta2", "delta3", "p1", "p2", "mu")
Z_NAMES = tuple(f"sigma{k}" for k in range(1, 9))
HISTORY_HEADER = ("epoch", "total", "data", "residual")


class CalibrationDivergence(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"calibration diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class CalibrationConfig:
    epochs: int = 20_000
    lr: float = 1e-3
    lambda_data: float = 1.0
    lambda_de: float = 1.0
    n_mc: int = 5
    grid: float = 0.5
    augment: int = 1
    hidden: tuple[int, ...] = (32, 32, 32)
    seed: int = 0
    weighting: str = "scaled"  # "scaled": errors relative to each compartment's range; "raw": plain proportions

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.n_mc < 1:
            raise ValueError("epochs must be >= 0, lr > 0 and n_mc >= 1")
        if min(self.lambda_data, self.lambda_de) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 < self.grid <= 1:
            raise ValueError(f"grid fraction must lie in (0, 1], got {self.grid}")
        if self.weighting not in ("scaled", "raw"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def paper(cls, **kw) -> "CalibrationConfig":
        base = dict(epochs=100_000, lr=1e-6, n_mc=5, grid=0.5, augment=5, hidden=(128,) * 4, weighting="raw")
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def default_centers(p: EpidemicParams = B.PARAMS) -> dict[str, float]:
    c = {k: getattr(p, k) for k in THETA_NAMES if k != "p1"}
    c["p1"] = p.hosp_link.intercept
    return {k: c[k] for k in THETA_NAMES}


def constrain_to_grid(raw, center, g: float):
    """Map an unconstrained value into (center(1-g), center(1+g))."""
    if isinstance(raw, ad.Node):
        return center * (1.0 - g) + (2.0 * g * np.asarray(center)) * ad.sigmoid(raw)
    return center * (1.0 - g) + 2.0 * g * center * ad.sigmoid_value(raw)


def _row_sq_mean(err, weight=None):
    if isinstance(err, ad.Node):
        sq = ad.square(err)
        if weight is not None:
            sq = sq * weight
        return ad.mean(ad.sum_(sq, axis=-1))
    sq = np.square(err) if weight is None else np.square(err) * weight
    return float(np.mean(np.sum(sq, axis=-1)))


def data_loss(pred, obs, weight=None):
    """Mean over dates of the summed squared compartment errors."""
    obs = np.asarray(obs, dtype=np.float64)
    if tuple(pred.shape) != obs.shape:
        raise ValueError(f"prediction shape {pred.shape} != observation shape {obs.shape}")
    return _row_sq_mean(pred - obs, weight)


def _alpha_at(alpha_series: np.ndarray, t_series: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Piecewise-constant rate: the value at the latest series time <= t."""
    i = np.searchsorted(t_series, t + 1e-9, side="right") - 1
    return alpha_series[np.clip(i, 0, len(alpha_series) - 1)]


def _rates_cols(X, alpha, theta: dict, Lambda: float, zeta: float):
    cols = [X[:, k] for k in range(8)]
    return rates(cols, alpha, theta["p1"], Lambda, zeta, theta["beta1"], theta["beta2"], theta["beta3"],
                 theta["sigma_vacc"], theta["gamma"], theta["delta1"], theta["delta2"], theta["delta3"],
                 theta["p2"], theta["mu"])


@dataclass
class TimeGrid:
    """Collocation times and the network's input normalisation."""

    t: np.ndarray
    t0: float
    span: float

    @classmethod
    def of(cls, t) -> "TimeGrid":
        t = np.asarray(t, dtype=np.float64)
        return cls(t, float(t[0]), float(max(t[-1] - t[0], 1e-12)))

    @property
    def inputs(self) -> np.ndarray:
        return (2.0 * (self.t - self.t0) / self.span - 1.0)[:, None]

    @property
    def d_input(self) -> float:
        return 2.0 / self.span


def network_outputs(net: DenseNetwork, grid: TimeGrid, scale, params=None):
    return net.forward(grid.inputs, params) * scale


def residual_loss_det(net: DenseNetwork, grid: TimeGrid, theta: dict, alpha, Lambda: float, zeta: float,
                      scale=1.0, weight=None, params=None):
    """Mean over dates of squared (model right-hand side - network time derivative)."""
    y, dy = net.forward_tangent(grid.inputs, np.full_like(grid.inputs, grid.d_input), params)
    X = y * scale
    dX = dy * scale
    f = ad.stack(list(_rates_cols(X, alpha, theta, Lambda, zeta)), axis=-1)
    return _row_sq_mean(f - dX, weight)


def mc_increments(seed: int, epoch: int, j: int, shape) -> np.ndarray:
    return np.random.default_rng([int(seed), 1, int(epoch), int(j)]).standard_normal(shape)


def residual_loss_sto(net: DenseNetwork, grid: TimeGrid, theta: dict, z, alpha, Lambda: float, zeta: float,
                      n_mc: int, dt: float, seed: int, epoch: int = 0, scale=1.0, weight=None, params=None,
                      X=None):
    """Average over Monte Carlo draws of the one-step Euler-Maruyama mismatch."""
    if X is None:
        X = network_outputs(net, grid, scale, params)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two dates")
    cur, nxt = X[:-1], X[1:]
    f = ad.stack(list(_rates_cols(cur, alpha[:-1], theta, Lambda, zeta)), axis=-1)
    base = cur + f * dt
    diff = cur * z
    total = None
    for j in range(n_mc):
        dW = mc_increments(seed, epoch, j, (n - 1, 8)) * math.sqrt(dt)
        lj = _row_sq_mean(base + diff * dW - nxt, weight)
        total = lj if total is None else total + lj
    return total * (1.0 / n_mc)


@dataclass
class ParamEstimate:
    theta: EpidemicParams
    z: NoiseIntensities | None
    history: np.ndarray  # (epochs + 1, 4): epoch, total, data, residual
    values: dict
    config: CalibrationConfig
    centers: dict
    net: DenseNetwork | None = None
    scale: np.ndarray | None = None
    kind: str = "deterministic"

    def to_json_dict(self, history_path: str = "") -> dict:
        th = {k: self.values[k] for k in THETA_NAMES}
        th.update(Lambda=self.theta.Lambda, zeta=self.theta.zeta)
        return {
            "kind": self.kind,
            "theta": th,
            "z": {k: self.values[k] for k in Z_NAMES} if self.z is not None else None,
            "grid_centers": self.centers,
            "loss_history_path": history_path,
            "config": self.config.to_dict(),
        }

    def save(self, json_path, history_path) -> None:
        write_history(history_path, self.history)
        doc = self.to_json_dict(Path(history_path).name)
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def estimate_from_json(doc: dict, link: HospitalizationLink | None = None) -> tuple[EpidemicParams, NoiseIntensities | None]:
    """Rebuild (theta, z) from a saved estimate.

    ``link`` replaces the calibrated constant p1 with an alpha-dependent link
    (as used for control); by default p1 stays constant.
    """
    th = dict(doc["theta"])
    p1 = th.pop("p1")
    hl = link if link is not None else HospitalizationLink(p1, 0.0)
    theta = EpidemicParams(**th, hosp_link=hl)
    z = NoiseIntensities(tuple(doc["z"][k] for k in Z_NAMES)) if doc.get("z") else None
    return theta, z


def write_history(path, history: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for row in history:
            w.writerow([int(row[0]), *(f"{v:.10g}" for v in row[1:])])


def _theta_from_values(values: dict, Lambda: float, zeta: float) -> EpidemicParams:
    kw = {k: float(values[k]) for k in THETA_NAMES if k != "p1"}
    return EpidemicParams(Lambda=Lambda, zeta=zeta, hosp_link=HospitalizationLink(float(values["p1"]), 0.0), **kw)


def _fit(series: CompartmentSeries, cfg: CalibrationConfig, stochastic: bool, centers: dict | None,
         z_centers, Lambda: float | None, zeta: float | None, callback=None) -> ParamEstimate:
    centers = dict(centers or default_centers())
    Lambda = B.PARAMS.Lambda if Lambda is None else Lambda
    zeta = B.PARAMS.zeta if zeta is None else zeta
    data = augment_cubic_spline(series, cfg.augment) if cfg.augment > 1 else series
    grid = TimeGrid.of(data.t)
    obs = data.states
    alpha = _alpha_at(series.alpha, series.t, grid.t)
    dt = float(grid.t[1] - grid.t[0])
    if stochastic and not np.allclose(np.diff(grid.t), dt):
        raise ValueError("stochastic calibration needs evenly spaced dates")
    scale = np.maximum(2.0 * obs.max(axis=0), 1e-6) if cfg.weighting == "scaled" else np.ones(8)
    weight = 1.0 / scale**2 if cfg.weighting == "scaled" else None

    c_theta = np.array([centers[k] for k in THETA_NAMES])
    if stochastic:
        c_z = np.asarray(z_centers if z_centers is not None else B.NOISE.to_array(), dtype=np.float64)
        if np.any(c_z <= 0):
            raise ValueError("noise grid centres must be positive")
    rng = np.random.default_rng([int(cfg.seed), 0])
    net = DenseNetwork.init([1, *cfg.hidden, 8], rng, hidden="tanh", output="sigmoid")
    params = net.params() + [np.zeros(len(THETA_NAMES))] + ([np.zeros(8)] if stochastic else [])
    state = AdamState.for_params(params, lr=cfg.lr)
    n_net = len(net.params())
    history = []

    def evaluate(params, epoch):
        nodes = [ad.parameter(p) for p in params]
        th_vec = constrain_to_grid(nodes[n_net], c_theta, cfg.grid)
        theta = {k: th_vec[i] for i, k in enumerate(THETA_NAMES)}
        X = network_outputs(net, grid, scale, nodes[:n_net])
        ld = data_loss(X, obs, weight)
        if stochastic:
            z = constrain_to_grid(nodes[n_net + 1], c_z, cfg.grid)
            lr_ = residual_loss_sto(net, grid, theta, z, alpha, Lambda, zeta, cfg.n_mc, dt, cfg.seed, epoch,
                                    scale, weight, nodes[:n_net], X=X)
        else:
            lr_ = residual_loss_det(net, grid, theta, alpha, Lambda, zeta, scale, weight, nodes[:n_net])
        total = cfg.lambda_data * ld + cfg.lambda_de * lr_
        return nodes, total, ld, lr_

    for epoch in range(cfg.epochs + 1):
        nodes, total, ld, lr_ = evaluate(params, epoch)
        tv = float(total.value)
        history.append((epoch, tv, float(ld.value), float(lr_.value)))
        if not math.isfinite(tv):
            raise CalibrationDivergence(epoch, "non-finite loss")
        if callback is not None:
            callback(epoch, tv)
        if epoch == cfg.epochs:
            break
        g = backward(total, nodes)
        try:
            params, state = adam_step(state, params, [g[n] for n in nodes])
        except NonFiniteGradientError as exc:
            raise CalibrationDivergence(epoch, str(exc)) from None

    net = net.with_params(params[:n_net])
    th_vals = constrain_to_grid(params[n_net], c_theta, cfg.grid)
    values = {k: float(th_vals[i]) for i, k in enumerate(THETA_NAMES)}
    z = None
    if stochastic:
        z_vals = constrain_to_grid(params[n_net + 1], c_z, cfg.grid)
        values.update({k: float(z_vals[i]) for i, k in enumerate(Z_NAMES)})
        z = NoiseIntensities(tuple(float(v) for v in z_vals))
    centers_out = {k: float(c) for k, c in zip(THETA_NAMES, c_theta)}
    if stochastic:
        centers_out.update({k: float(c) for k, c in zip(Z_NAMES, c_z)})
    return ParamEstimate(
        theta=_theta_from_values(values, Lambda, zeta),
        z=z,
        history=np.array(history),
        values=values,
        config=cfg,
        centers=centers_out,
        net=net,
        scale=scale,
        kind="stochastic" if stochastic else "deterministic",
    )


def fit_deterministic(series: CompartmentSeries, cfg: CalibrationConfig, centers: dict | None = None,
                      Lambda: float | None = None, zeta: float | None = None, callback=None) -> ParamEstimate:
    return _fit(series, cfg, False, centers, None, Lambda, zeta, callback)


def fit_stochastic(series: CompartmentSeries, cfg: CalibrationConfig, centers: dict | None = None,
                   z_centers=None, Lambda: float | None = None, zeta: float | None = None,
                   callback=None) -> ParamEstimate:
    return _fit(series, cfg, True, centers, z_centers, Lambda, zeta, callback)


@dataclass(frozen=True)
class FitMetrics:
    mse: float
    mae: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "mae": self.mae}


def fit_metrics(pred, obs) -> FitMetrics:
    """MSE and MAE averaged over compartments and dates."""
    err = np.asarray(pred, dtype=np.float64) - np.asarray(obs, dtype=np.float64)
    return FitMetrics(float(np.mean(err**2)), float(np.mean(np.abs(err))))


def predict(theta: EpidemicParams, z: NoiseIntensities | None, test: CompartmentSeries, x0=None,
            n_paths: int = 200, seed: int = 0) -> np.ndarray:
    """Model trajectory over the test dates under the observed vaccination rates."""
    if len(test) == 0:
        raise ValueError("empty test series")
    x0 = test.states[0] if x0 is None else x0
    x0 = x0.to_array() if hasattr(x0, "to_array") else np.asarray(x0, dtype=np.float64)
    steps = len(test) - 1
    dt = float(test.t[1] - test.t[0]) if steps else 1.0
    cfg = IntegratorConfig(dt, steps * dt)
    pol = series_policy(test.alpha[:-1] if steps else [])
    if z is None or not any(z.sigmas):
        return deterministic_path(x0, pol, theta, cfg).states
    return simulate_ensemble(x0, pol, theta, z, cfg, n_paths, seed).mean.states


def evaluate_fit(est: ParamEstimate, test: CompartmentSeries, x0=None, n_paths: int = 200,
                 seed: int = 0) -> FitMetrics:
    return fit_metrics(predict(est.theta, est.z, test, x0, n_paths, seed), test.states)


def synthetic_series(theta: EpidemicParams, x0, alpha, z: NoiseIntensities | None = None, seed: int = 0,
                     start_index: int = 0, substeps: int = 1) -> CompartmentSeries:
    """Daily series simulated from ``x0`` under the daily rate sequence ``alpha``.

    ``substeps`` Euler(-Maruyama) steps are taken per day and the path is
    sampled daily; with noise a single path is drawn from ``seed``.
    """
    from .epimodel import NoisePath, simulate_path

    alpha = np.asarray(alpha, dtype=np.float64)
    steps = len(alpha) - 1
    m = int(substeps)
    cfg = IntegratorConfig(1.0 / m, float(steps))
    x0 = x0.to_array() if hasattr(x0, "to_array") else np.asarray(x0, dtype=np.float64)
    pol = series_policy(np.repeat(alpha[:-1], m))
    if z is None:
        states = deterministic_path(x0, pol, theta, cfg).states[::m]
    else:
        noise = NoisePath.sample(cfg.steps, np.random.default_rng([int(seed), 7]))
        states = simulate_path(x0, pol, theta, z, cfg, noise).states[::m]
    dates = [f"d{start_index + i:03d}" for i in range(steps + 1)]
    return CompartmentSeries(dates, states, alpha, 1.0)
