"""Per-timestep deep control of the vaccination rate, and strategy evaluation.

Each step ``n`` owns a small network mapping the current state to a rate in
``[alpha_min, alpha_max]``. All subnetworks are trained jointly by Adam on the
batch-mean cost of simulated stochastic rollouts, differentiating through the
dynamics with the noise held fixed (pathwise gradient).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .costmodel import (CostParams, ExpectedCost, expected_cost, path_costs, state_cost_weights,
                        terminal_rate_node, total_rate_node)
from .epimodel import (
    EpidemicParams,
    IntegratorConfig,
    NoiseIntensities,
    Trajectory,
    em_step_node,
    ensemble_noise,
    simulate_batch,
)
from .nnkit import AdamState, DenseNetwork, NonFiniteGradientError, adam_step, backward
from .nnkit import autodiff as ad


class ControlDivergence(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"control training diverged at iteration {iteration}" + (f": {detail}" if detail else ""))
        self.iteration = iteration


@dataclass(frozen=True)
class ControlConfig:
    iterations: int = 10_000
    runs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    bounds: tuple[float, float] | None = None
    hidden: tuple[int, ...] = (32, 32, 32)
    seed: int = 0
    dt: float = 1.0
    horizon: float = 60.0
    terminal_weight: float = 0.0  # optional cost on the state left at the horizon; 0 keeps the plain objective

    def __post_init__(self):
        if self.iterations < 1 or self.runs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 1, runs >= 1, batch_size >= 1 and lr > 0 are required")
        if self.bounds is not None:
            lo, hi = (float(b) for b in self.bounds)
            if not (0 <= lo <= hi):
                raise ValueError(f"bounds must satisfy 0 <= alpha_min <= alpha_max, got {self.bounds}")
            object.__setattr__(self, "bounds", (lo, hi))
        if self.terminal_weight < 0:
            raise ValueError("terminal_weight must be >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        IntegratorConfig(self.dt, self.horizon)

    @classmethod
    def desk(cls, **kw) -> "ControlConfig":
        """Minutes-scale budget: fewer iterations and runs, larger step size."""
        base = dict(iterations=1000, runs=2, lr=1e-2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper(cls, **kw) -> "ControlConfig":
        base = dict(iterations=10_000, runs=5, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.dt, self.horizon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["bounds"] = list(self.bounds) if self.bounds is not None else None
        return d


def bounds_from_series(alpha_obs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(alpha_obs, dtype=np.float64)
    return float(a.min()), float(a.max())


def input_scale_for(x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    return np.maximum(x0, 1e-4)


@dataclass
class PolicyNetwork:
    nets: list[DenseNetwork]
    bounds: tuple[float, float]
    input_scale: np.ndarray

    @classmethod
    def init(cls, steps: int, bounds, rng: np.random.Generator, hidden=(32, 32, 32), input_scale=None) -> "PolicyNetwork":
        """Fresh subnetworks; the output layer starts at zero so every rate is the midpoint."""
        nets = [DenseNetwork.init([8, *hidden, 1], rng, hidden="tanh", output="affine-bounded",
                                  bounds=tuple(bounds), zero_last=True) for _ in range(steps)]
        scale = np.ones(8) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        return cls(nets, tuple(bounds), scale)

    @property
    def steps(self) -> int:
        return len(self.nets)

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params()]

    def with_params(self, flat: list[np.ndarray]) -> "PolicyNetwork":
        out, i = [], 0
        for net in self.nets:
            k = len(net.params())
            out.append(net.with_params(flat[i:i + k]))
            i += k
        return PolicyNetwork(out, self.bounds, self.input_scale)

    def _check(self, n: int):
        if not 0 <= n < self.steps:
            raise IndexError(f"step {n} outside the {self.steps}-step horizon")

    def rate(self, n: int, x) -> np.ndarray:
        """Rates for one state ``(8,)`` or a batch ``(B, 8)``."""
        self._check(n)
        x = np.asarray(x.to_array() if hasattr(x, "to_array") else x, dtype=np.float64)
        y = self.nets[n](np.atleast_2d(x) / self.input_scale)[:, 0]
        return y if x.ndim == 2 else y[0]

    def __call__(self, n: int, x):
        return self.rate(n, x)

    def to_dict(self) -> dict:
        return {"bounds": list(self.bounds), "input_scale": self.input_scale.tolist(),
                "networks": [net.to_dict() for net in self.nets]}

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyNetwork":
        return cls([DenseNetwork.from_dict(d) for d in doc["networks"]], tuple(doc["bounds"]),
                   np.asarray(doc["input_scale"], dtype=np.float64))


def policy_rate(policy: PolicyNetwork, n: int, x) -> float:
    return float(policy.rate(n, x))


def _rollout_loss(policy: PolicyNetwork, nodes: list[ad.Node], x0: np.ndarray, p: EpidemicParams,
                  sig: np.ndarray, cp: CostParams, icfg: IntegratorConfig, noise: np.ndarray,
                  terminal_weight: float) -> ad.Node:
    B = noise.shape[0]
    x = ad.constant(np.broadcast_to(x0, (B, 8)).copy())
    inv = 1.0 / policy.input_scale
    total = None
    i = 0
    for n, net in enumerate(policy.nets):
        k = len(net.weights) * 2
        a = net.forward_fused(x * inv, nodes[i:i + k])[:, 0]
        i += k
        c = total_rate_node(x, a, cp) * icfg.dt
        total = c if total is None else total + c
        x = em_step_node(x, a, p, sig, icfg.dt, noise[:, n])
    if terminal_weight > 0:
        total = total + terminal_weight * icfg.dt * terminal_rate_node(x, cp)
    return ad.mean(total)


@dataclass
class TrainResult:
    policy: PolicyNetwork
    history: np.ndarray  # per-iteration batch-mean loss


def train_policy(x0, p: EpidemicParams, z: NoiseIntensities, cp: CostParams, cfg: ControlConfig,
                 run: int = 0, callback: Callable[[int, float], None] | None = None) -> TrainResult:
    if cfg.bounds is None:
        raise ValueError("control bounds must be set (see bounds_from_series)")
    x0 = np.asarray(x0.to_array() if hasattr(x0, "to_array") else x0, dtype=np.float64)
    icfg = cfg.integrator
    rng = np.random.default_rng([int(cfg.seed), int(run), 0])
    policy = PolicyNetwork.init(icfg.steps, cfg.bounds, rng, cfg.hidden, input_scale_for(x0))
    params = policy.params()
    shapes = [q.shape for q in params]
    cuts = np.cumsum([q.size for q in params])[:-1]
    flat = np.concatenate([q.ravel() for q in params])
    state = AdamState.for_params([flat], lr=cfg.lr)
    sig = z.to_array()
    hist = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        noise = np.random.default_rng([int(cfg.seed), int(run), 1, it]).standard_normal((cfg.batch_size, icfg.steps, 8))
        nodes = [ad.parameter(q) for q in params]
        loss = _rollout_loss(policy, nodes, x0, p, sig, cp, icfg, noise, cfg.terminal_weight)
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise ControlDivergence(it, "non-finite loss")
        hist[it] = lv
        g = backward(loss, nodes)
        gflat = np.concatenate([g[q].ravel() for q in nodes])
        try:
            (flat,), state = adam_step(state, [flat], [gflat])
        except NonFiniteGradientError as exc:
            raise ControlDivergence(it, str(exc)) from None
        params = [c.reshape(sh) for c, sh in zip(np.split(flat, cuts), shapes)]
        if callback is not None:
            callback(it, lv)
    return TrainResult(policy.with_params(params), hist)


# ---- strategies ----

@dataclass
class Strategy:
    name: str
    rate: Callable[[int, np.ndarray], np.ndarray]
    kind: str = "custom"

    def __call__(self, n, x):
        return self.rate(n, x)


def averaged_policy(policies: Sequence[PolicyNetwork]) -> Callable:
    if not policies:
        raise ValueError("need at least one trained policy")
    return lambda n, x: np.mean([pol.rate(n, x) for pol in policies], axis=0)


def optimal_strategy(policies: Sequence[PolicyNetwork]) -> Strategy:
    return Strategy("optimal", averaged_policy(policies), "optimal")


def actual_strategy(alpha_obs: Sequence[float], steps: int) -> Strategy:
    a = np.asarray(alpha_obs, dtype=np.float64)
    if len(a) < steps:
        raise ValueError(f"actual series has {len(a)} rates, horizon needs {steps}")
    if np.any(a < 0):
        raise ValueError("actual rates must be >= 0")
    a = a[:steps].copy()
    return Strategy("actual", lambda n, x: a[n], "actual")


def constant_strategy(rate: float) -> Strategy:
    if not rate >= 0:
        raise ValueError("constant rate must be >= 0")
    return Strategy("constant", lambda n, x: rate, "constant")


def constant_from_actual(alpha_obs: Sequence[float], steps: int) -> Strategy:
    return constant_strategy(float(np.mean(np.asarray(alpha_obs, dtype=np.float64)[:steps])))


def zero_strategy() -> Strategy:
    return Strategy("zero", lambda n, x: 0.0, "zero")


@dataclass
class RolloutResult:
    name: str
    mean: Trajectory
    expected: ExpectedCost
    per_path: np.ndarray  # (n_paths, 4) breakdown components
    master_seed: int
    n_paths: int

    @property
    def totals(self) -> np.ndarray:
        return self.per_path.sum(axis=1)

    @property
    def total(self) -> float:
        return self.expected.mean.total

    @property
    def total_se(self) -> float:
        return self.expected.total_stderr

    @property
    def alpha_path(self) -> np.ndarray:
        return self.mean.alphas


def evaluate_strategy(strategy: Strategy, x0, p: EpidemicParams, z: NoiseIntensities, cp: CostParams,
                      icfg: IntegratorConfig, n_paths: int, master_seed: int) -> RolloutResult:
    """Monte Carlo cost of a strategy; the noise depends only on (master seed, path index)."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    noise = ensemble_noise(master_seed, n_paths, icfg.steps)
    states, alphas = simulate_batch(x0, strategy, p, z, icfg, noise)
    per = path_costs(states, alphas, cp, icfg.dt)
    mean = Trajectory(states.mean(axis=0), alphas.mean(axis=0), icfg.dt)
    return RolloutResult(strategy.name, mean, expected_cost(per), per, int(master_seed), n_paths)


def pooled_se(a: RolloutResult, b: RolloutResult) -> float:
    return math.hypot(a.total_se, b.total_se)


def average_policies(policies: Sequence[PolicyNetwork], x0, p: EpidemicParams, z: NoiseIntensities,
                     icfg: IntegratorConfig, n_paths: int, master_seed: int) -> np.ndarray:
    """Step-wise mean of each run's rate path along its own mean trajectory."""
    if not policies:
        raise ValueError("need at least one trained policy")
    paths = []
    for pol in policies:
        r = evaluate_strategy(Strategy("run", pol), x0, p, z, CostParams(), icfg, n_paths, master_seed)
        paths.append(r.alpha_path)
    return np.mean(paths, axis=0)


def write_alpha_csv(path, alphas: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "alpha"])
        for n, a in enumerate(alphas):
            w.writerow([n, f"{a:.10g}"])


def save_policies(path, policies: Sequence[PolicyNetwork], extra: dict | None = None) -> None:
    doc = {"runs": [pol.to_dict() for pol in policies]}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_policies(path) -> list[PolicyNetwork]:
    with open(path) as fh:
        doc = json.load(fh)
    return [PolicyNetwork.from_dict(d) for d in doc["runs"]]


def brute_force_one_step(x0, p: EpidemicParams, z: NoiseIntensities, cp: CostParams, bounds, points: int,
                         noise: np.ndarray, dt: float = 1.0, terminal_weight: float = 0.0) -> tuple[float, np.ndarray]:
    """Exhaustive search of the single-step rate on a uniform grid (same noise paths)."""
    from .epimodel import _em_array

    lo, hi = bounds
    grid = np.linspace(lo, hi, points)
    x0 = np.asarray(x0, dtype=np.float64)
    w, k = state_cost_weights(cp)
    sig = z.to_array()
    costs = []
    for a in grid:
        x = np.broadcast_to(x0, (noise.shape[0], 8))
        c = (cp.c1 * a * a + x @ w + k) * dt
        x1 = _em_array(x, np.full(noise.shape[0], a), p, sig, dt, noise[:, 0])
        if terminal_weight > 0:
            c = c + terminal_weight * dt * (x1 @ w + k)
        costs.append(c.mean())
    costs = np.array(costs)
    return float(grid[int(np.argmin(costs))]), costs
