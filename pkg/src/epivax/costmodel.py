"""Government expenditure: vaccination, quarantine, healthcare and labour loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .epimodel import CompartmentState, Trajectory
from .nnkit import autodiff as ad

CSV_HEADER = ("strategy", "policy_cost", "healthcare_cost", "economic_cost", "total")


@dataclass(frozen=True)
class CostParams:
    c1: float = 100.0
    c2: float = 20.0
    c3: float = 50.0
    c4: float = 200.0
    c5: float = 1000.0
    c6: float = 100.0
    psi: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.psi > 1:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")

    def scaled(self, k: float) -> "CostParams":
        return CostParams(*(getattr(self, f.name) * k for f in fields(self) if f.name != "psi"), psi=self.psi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CostBreakdown:
    vaccination: float = 0.0
    quarantine: float = 0.0
    healthcare: float = 0.0
    economic: float = 0.0

    @property
    def policy(self) -> float:
        return self.vaccination + self.quarantine

    @property
    def total(self) -> float:
        return self.vaccination + self.quarantine + self.healthcare + self.economic

    def as_array(self) -> np.ndarray:
        return np.array([self.vaccination, self.quarantine, self.healthcare, self.economic])

    @classmethod
    def from_array(cls, a) -> "CostBreakdown":
        return cls(*(float(v) for v in a))

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown.from_array(self.as_array() + other.as_array())

    def __sub__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown.from_array(self.as_array() - other.as_array())

    def scale(self, k: float) -> "CostBreakdown":
        return CostBreakdown.from_array(self.as_array() * k)

    def csv_row(self, label: str) -> list[str]:
        return [str(label), *(f"{v:.10g}" for v in (self.policy, self.healthcare, self.economic, self.total))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(policy=self.policy, total=self.total)
        return d


def cost_rates(x, alpha, cp: CostParams):
    """The four cost rates for states ``x`` (any 8-sequence of columns).

    Works on floats, numpy columns and graph nodes alike.
    """
    S, V, E, I1, I2, I3, R, D = x
    vacc = cp.c1 * alpha * alpha
    quar = cp.c2 * E
    health = cp.c3 * I1 + cp.c4 * I2 + cp.c5 * I3
    econ = cp.c6 * cp.psi * (1.0 - (S + V + R))
    return vacc, quar, health, econ


def instantaneous_cost(x: CompartmentState, alpha: float, cp: CostParams) -> CostBreakdown:
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError(f"vaccination rate must be finite and >= 0, got {alpha}")
    arr = x.to_array() if isinstance(x, CompartmentState) else np.asarray(x, dtype=np.float64)
    return CostBreakdown(*(float(v) for v in cost_rates(arr, alpha, cp)))


def path_costs(states: np.ndarray, alphas: np.ndarray, cp: CostParams, dt: float) -> np.ndarray:
    """Left-endpoint accumulated costs for batched paths.

    ``states`` is ``(..., N+1, 8)`` and ``alphas`` is ``(..., N)``; returns
    ``(..., 4)`` in breakdown order.
    """
    x = states[..., :-1, :]
    cols = [x[..., k] for k in range(8)]
    rates = cost_rates(cols, alphas, cp)
    return np.stack([r.sum(axis=-1) * dt for r in rates], axis=-1)


def accumulate_cost(traj: Trajectory, cp: CostParams, dt: float | None = None) -> CostBreakdown:
    dt = traj.dt if dt is None else dt
    if traj.steps == 0:
        return CostBreakdown()
    return CostBreakdown.from_array(path_costs(traj.states, traj.alphas, cp, dt))


@dataclass(frozen=True)
class ExpectedCost:
    mean: CostBreakdown
    stderr: CostBreakdown
    total_stderr: float
    n: int


def expected_cost(per_path: Sequence[CostBreakdown] | np.ndarray) -> ExpectedCost:
    """Mean breakdown and standard errors (sample std / sqrt(n); 0 for n = 1)."""
    arr = np.asarray([b.as_array() for b in per_path] if not isinstance(per_path, np.ndarray) else per_path)
    n = arr.shape[0]
    if n < 1:
        raise ValueError("need at least one path")
    mean = arr.mean(axis=0)
    totals = arr.sum(axis=1)
    if n == 1:
        se, tse = np.zeros(4), 0.0
    else:
        se = arr.std(axis=0, ddof=1) / math.sqrt(n)
        tse = float(totals.std(ddof=1) / math.sqrt(n))
    return ExpectedCost(CostBreakdown.from_array(mean), CostBreakdown.from_array(se), tse, n)


def state_cost_weights(cp: CostParams) -> tuple[np.ndarray, float]:
    """(w, k) with state-dependent cost rate ``x @ w + k`` (everything but c1 alpha^2)."""
    e = cp.c6 * cp.psi
    return np.array([-e, -e, cp.c2, cp.c3, cp.c4, cp.c5, -e, 0.0]), e


def total_rate_node(x, alpha, cp: CostParams):
    """Total instantaneous cost for batched graph states ``(B, 8)`` and rates ``(B,)``."""
    w, k = state_cost_weights(cp)
    x, alpha = ad.as_node(x), ad.as_node(alpha)
    out = cp.c1 * alpha.value**2 + x.value @ w + k
    parents = []
    if x.op != "constant" or x.parents:
        parents.append((x, lambda g: np.multiply.outer(g, w)))
    if alpha.op != "constant" or alpha.parents:
        parents.append((alpha, lambda g: 2.0 * cp.c1 * alpha.value * g))
    return ad.Node(out, tuple(parents), "cost_rate")


def terminal_rate_node(x, cp: CostParams):
    """State-dependent part of the cost rate for batched graph states."""
    w, k = state_cost_weights(cp)
    return ad.matmul(x, w[:, None])[:, 0] + k
