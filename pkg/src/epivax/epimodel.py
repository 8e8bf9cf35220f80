"""SVEI3RD dynamics: drift, multiplicative diffusion, Euler / Euler-Maruyama.

The right-hand side is written once (:func:`rates`) against plain arithmetic so
that the same code evaluates on floats, numpy arrays (vectorised ensembles),
and :class:`~epivax.nnkit.Node` graphs (differentiable rollouts).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .nnkit import autodiff as ad

COMPARTMENTS = ("S", "V", "E", "I1", "I2", "I3", "R", "D")


@dataclass(frozen=True)
class CompartmentState:
    S: float
    V: float
    E: float
    I1: float
    I2: float
    I3: float
    R: float
    D: float

    def __post_init__(self):
        for name in COMPARTMENTS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"compartment {name} must be finite and >= 0, got {v}")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in COMPARTMENTS], dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> "CompartmentState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (8,):
            raise ValueError(f"expected 8 compartments, got shape {x.shape}")
        return cls(*(float(v) for v in x))

    def total(self) -> float:
        return float(self.to_array().sum())


@dataclass(frozen=True)
class HospitalizationLink:
    """Mild-to-hospital rate as an affine function of the vaccination rate."""

    intercept: float = 0.0060
    slope: float = -0.1341

    def rate(self, alpha):
        return hospitalization_rate(alpha, self)


@dataclass(frozen=True)
class EpidemicParams:
    Lambda: float
    zeta: float
    beta1: float
    beta2: float
    beta3: float
    sigma_vacc: float
    gamma: float
    delta1: float
    delta2: float
    delta3: float
    p2: float
    mu: float
    hosp_link: HospitalizationLink = field(default_factory=HospitalizationLink)

    def __post_init__(self):
        for f in fields(self):
            if f.name == "hosp_link":
                continue
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be a finite non-negative rate, got {v}")
        if self.sigma_vacc > 1:
            raise ValueError(f"sigma_vacc must lie in [0, 1], got {self.sigma_vacc}")

    def scaled_betas(self, k: float) -> "EpidemicParams":
        return replace(self, beta1=self.beta1 * k, beta2=self.beta2 * k, beta3=self.beta3 * k)

    def with_constant_p1(self, p1: float) -> "EpidemicParams":
        return replace(self, hosp_link=HospitalizationLink(p1, 0.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hosp_link"] = asdict(self.hosp_link)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpidemicParams":
        d = dict(d)
        link = d.pop("hosp_link", None)
        return cls(**d, hosp_link=HospitalizationLink(**link) if link else HospitalizationLink())


@dataclass(frozen=True)
class NoiseIntensities:
    sigmas: tuple[float, ...]

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        if len(s) != 8 or any(not math.isfinite(v) or v < 0 for v in s):
            raise ValueError(f"need 8 finite non-negative intensities, got {self.sigmas}")
        object.__setattr__(self, "sigmas", s)

    @classmethod
    def zero(cls) -> "NoiseIntensities":
        return cls((0.0,) * 8)

    def scaled(self, k: float) -> "NoiseIntensities":
        return NoiseIntensities(tuple(k * s for s in self.sigmas))

    def to_array(self) -> np.ndarray:
        return np.array(self.sigmas)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1.0
    horizon: float = 60.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        n = self.horizon / self.dt
        if self.horizon < 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"horizon {self.horizon} is not an integral number of steps of {self.dt}")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class NoisePath:
    increments: np.ndarray  # (N, 8) standard normals

    @classmethod
    def sample(cls, steps: int, rng: np.random.Generator) -> "NoisePath":
        return cls(rng.standard_normal((steps, 8)))

    @classmethod
    def zeros(cls, steps: int) -> "NoisePath":
        return cls(np.zeros((steps, 8)))


@dataclass
class Trajectory:
    states: np.ndarray  # (N+1, 8)
    alphas: np.ndarray  # (N,)
    dt: float = 1.0

    @property
    def steps(self) -> int:
        return len(self.alphas)

    def state(self, n: int) -> CompartmentState:
        return CompartmentState.from_array(self.states[n])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *COMPARTMENTS, "alpha"])
            for n, x in enumerate(self.states):
                a = f"{self.alphas[n]:.10g}" if n < len(self.alphas) else ""
                w.writerow([f"{n * self.dt:.10g}", *(f"{v:.10g}" for v in x), a])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        states = np.array([[float(r[c]) for c in COMPARTMENTS] for r in rows])
        alphas = np.array([float(r["alpha"]) for r in rows if r["alpha"] != ""])
        dt = float(rows[1]["t"]) - float(rows[0]["t"]) if len(rows) > 1 else 1.0
        return cls(states, alphas, dt)


def _clip(x, lo, hi):
    if isinstance(x, ad.Node):
        return ad.clip(x, lo, hi)
    return np.clip(x, lo, hi)


def _relu(x):
    if isinstance(x, ad.Node):
        return ad.relu(x)
    return np.maximum(x, 0.0)


def hospitalization_rate(alpha, link: HospitalizationLink):
    """p1(alpha) = clamp(a + b*alpha, 0, 1)."""
    return _clip(link.intercept + link.slope * alpha, 0.0, 1.0)


def rates(x, alpha, p1, Lambda, zeta, beta1, beta2, beta3, sigma_vacc, gamma,
          delta1, delta2, delta3, p2, mu):
    """Deterministic right-hand side as a tuple of eight compartment rates.

    ``x`` is any 8-sequence of compartment values (scalars, arrays or graph
    nodes); parameters may likewise be graph nodes.
    """
    S, V, E, I1, I2, I3, R, D = x
    force = beta1 * I1 + beta2 * I2 + beta3 * I3
    dS = Lambda - force * S - alpha * S - zeta * S
    dV = alpha * S - force * sigma_vacc * V - zeta * V
    dE = force * (S + sigma_vacc * V) - gamma * E - zeta * E
    dI1 = gamma * E - (delta1 + p1) * I1 - zeta * I1
    dI2 = p1 * I1 - (delta2 + p2) * I2 - zeta * I2
    dI3 = p2 * I2 - (delta3 + mu) * I3 - zeta * I3
    dR = delta1 * I1 + delta2 * I2 + delta3 * I3 - zeta * R
    dD = mu * I3
    return dS, dV, dE, dI1, dI2, dI3, dR, dD


def _param_args(p: EpidemicParams):
    return (p.Lambda, p.zeta, p.beta1, p.beta2, p.beta3, p.sigma_vacc, p.gamma,
            p.delta1, p.delta2, p.delta3, p.p2, p.mu)


def drift_array(x: np.ndarray, alpha, p: EpidemicParams) -> np.ndarray:
    """Vectorised drift for states shaped ``(..., 8)``."""
    cols = [x[..., k] for k in range(8)]
    p1 = hospitalization_rate(np.asarray(alpha, dtype=np.float64), p.hosp_link)
    return np.stack(rates(cols, alpha, p1, *_param_args(p)), axis=-1)


def _as_array(x) -> np.ndarray:
    arr = x.to_array() if isinstance(x, CompartmentState) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("state contains non-finite values")
    return arr


def drift(x, alpha: float, p: EpidemicParams) -> np.ndarray:
    """dX/dt of the deterministic model with p1 = hospitalization_rate(alpha)."""
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError(f"vaccination rate must be finite and >= 0, got {alpha}")
    return drift_array(_as_array(x), alpha, p)


def diffusion(x, z: NoiseIntensities) -> np.ndarray:
    return z.to_array() * _as_array(x)


def step_euler(x, alpha: float, p: EpidemicParams, dt: float) -> CompartmentState:
    xa = _as_array(x)
    return CompartmentState.from_array(np.maximum(xa + drift(xa, alpha, p) * dt, 0.0))


def _em_array(x, alpha, p, sig, dt, dW):
    return np.maximum(x + drift_array(x, alpha, p) * dt + sig * x * math.sqrt(dt) * dW, 0.0)


def step_euler_maruyama(x, alpha: float, p: EpidemicParams, z: NoiseIntensities,
                        dt: float, dW) -> CompartmentState:
    xa = _as_array(x)
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError(f"vaccination rate must be finite and >= 0, got {alpha}")
    return CompartmentState.from_array(_em_array(xa, alpha, p, z.to_array(), dt, np.asarray(dW, dtype=np.float64)))


def em_step_graph(cols, alpha, p: EpidemicParams, sig: np.ndarray, dt: float, dW: np.ndarray):
    """One clamped Euler-Maruyama step on graph columns (each shaped like alpha)."""
    p1 = hospitalization_rate(alpha, p.hosp_link)
    f = rates(cols, alpha, p1, *_param_args(p))
    sq = math.sqrt(dt)
    out = []
    for k in range(8):
        nxt = cols[k] + f[k] * dt
        if sig[k] != 0.0:
            nxt = nxt + cols[k] * (sig[k] * sq * dW[..., k])
        out.append(_relu(nxt))
    return out


Policy = Callable[[int, np.ndarray], "float | np.ndarray"]


def constant_policy(alpha: float) -> Policy:
    return lambda n, x: alpha


def _policy_alpha(policy: Policy, n: int, x: np.ndarray) -> np.ndarray:
    a = np.asarray(policy(n, x), dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a < 0):
        raise ValueError(f"policy returned an invalid rate at step {n}: {a}")
    return a


def simulate_path(x0, policy: Policy, p: EpidemicParams, z: NoiseIntensities,
                  cfg: IntegratorConfig, noise: NoisePath) -> Trajectory:
    N = cfg.steps
    if noise.increments.shape != (N, 8):
        raise ValueError(f"noise shape {noise.increments.shape} does not match {N} steps")
    x = _as_array(x0)
    sig = z.to_array()
    states = np.empty((N + 1, 8))
    alphas = np.empty(N)
    states[0] = x
    for n in range(N):
        a = float(_policy_alpha(policy, n, x))
        x = _em_array(x, a, p, sig, cfg.dt, noise.increments[n])
        states[n + 1] = x
        alphas[n] = a
    return Trajectory(states, alphas, cfg.dt)


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Generator for one path, keyed on (master seed, path index)."""
    return np.random.default_rng([int(master_seed), int(path_index)])


def ensemble_noise(master_seed: int, n_paths: int, steps: int) -> np.ndarray:
    """Standard-normal increments shaped ``(n_paths, steps, 8)``."""
    if steps == 0:
        return np.zeros((n_paths, 0, 8))
    return np.stack([path_rng(master_seed, i).standard_normal((steps, 8)) for i in range(n_paths)])


@dataclass
class EnsembleResult:
    mean: Trajectory
    terminal: np.ndarray  # (n_paths, 8)
    states: np.ndarray  # (n_paths, N+1, 8)
    alphas: np.ndarray  # (n_paths, N)


def simulate_batch(x0, policy: Policy, p: EpidemicParams, z: NoiseIntensities,
                   cfg: IntegratorConfig, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Step all paths together. ``policy`` receives states shaped ``(P, 8)``."""
    P, N = noise.shape[0], cfg.steps
    if noise.shape[1:] != (N, 8):
        raise ValueError(f"noise shape {noise.shape} does not match {N} steps")
    x = np.broadcast_to(_as_array(x0), (P, 8)).copy()
    sig = z.to_array()
    states = np.empty((P, N + 1, 8))
    alphas = np.empty((P, N))
    states[:, 0] = x
    for n in range(N):
        a = np.broadcast_to(_policy_alpha(policy, n, x), (P,)).astype(np.float64)
        x = _em_array(x, a, p, sig, cfg.dt, noise[:, n])
        states[:, n + 1] = x
        alphas[:, n] = a
    return states, alphas


def simulate_ensemble(x0, policy: Policy, p: EpidemicParams, z: NoiseIntensities,
                      cfg: IntegratorConfig, n_paths: int, master_seed: int) -> EnsembleResult:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    noise = ensemble_noise(master_seed, n_paths, cfg.steps)
    states, alphas = simulate_batch(x0, policy, p, z, cfg, noise)
    mean = Trajectory(states.mean(axis=0), alphas.mean(axis=0), cfg.dt)
    return EnsembleResult(mean, states[:, -1].copy(), states, alphas)


def deterministic_path(x0, policy: Policy, p: EpidemicParams, cfg: IntegratorConfig) -> Trajectory:
    return simulate_path(x0, policy, p, NoiseIntensities.zero(), cfg, NoisePath.zeros(cfg.steps))


def series_policy(alphas: Sequence[float]) -> Policy:
    alphas = np.asarray(alphas, dtype=np.float64)
    return lambda n, x: alphas[n]


def drift_vjp(x: np.ndarray, alpha: np.ndarray, p: EpidemicParams, u: np.ndarray):
    """Adjoint of the drift: returns (u @ df/dx, u . df/dalpha) for batched states.

    ``x`` is ``(B, 8)``, ``alpha`` and the result's second part are ``(B,)``.
    """
    S, V, E, I1, I2, I3, R, D = (x[:, k] for k in range(8))
    uS, uV, uE, u1, u2, u3, uR, uD = (u[:, k] for k in range(8))
    lnk = p.hosp_link
    lin = lnk.intercept + lnk.slope * alpha
    p1 = np.clip(lin, 0.0, 1.0)
    dp1 = np.where((lin > 0.0) & (lin < 1.0), lnk.slope, 0.0)
    lam = p.beta1 * I1 + p.beta2 * I2 + p.beta3 * I3
    sv, z = p.sigma_vacc, p.zeta
    w_lam = -uS * S - uV * sv * V + uE * (S + sv * V)
    g = np.empty_like(x)
    g[:, 0] = uS * (-lam - alpha - z) + uV * alpha + uE * lam
    g[:, 1] = uV * (-sv * lam - z) + uE * lam * sv
    g[:, 2] = -uE * (p.gamma + z) + u1 * p.gamma
    g[:, 3] = w_lam * p.beta1 - u1 * (p.delta1 + p1 + z) + u2 * p1 + uR * p.delta1
    g[:, 4] = w_lam * p.beta2 - u2 * (p.delta2 + p.p2 + z) + u3 * p.p2 + uR * p.delta2
    g[:, 5] = w_lam * p.beta3 - u3 * (p.delta3 + p.mu + z) + uR * p.delta3 + uD * p.mu
    g[:, 6] = -z * uR
    g[:, 7] = 0.0
    ga = -uS * S + uV * S + dp1 * I1 * (u2 - u1)
    return g, ga


def em_step_node(x: "ad.Node", alpha: "ad.Node", p: EpidemicParams, sig: np.ndarray, dt: float,
                 dW: np.ndarray) -> "ad.Node":
    """Batched clamped Euler-Maruyama step as one graph node.

    ``x`` is ``(B, 8)``, ``alpha`` is ``(B,)``; the backward pass uses the
    analytic drift adjoint instead of recording every arithmetic op.
    """
    x, alpha = ad.as_node(x), ad.as_node(alpha)
    xv, av = x.value, alpha.value
    noise = sig * math.sqrt(dt) * dW
    pre = xv + drift_array(xv, av, p) * dt + xv * noise
    mask = pre > 0.0
    out = np.where(mask, pre, 0.0)
    cache = {}

    def adj(g):
        if "v" not in cache:
            gy = g * mask
            gx, ga = drift_vjp(xv, av, p, gy * dt)
            cache["v"] = (gy + gx + gy * noise, ga)
        return cache["v"]

    parents = []
    if x.op != "constant" or x.parents:
        parents.append((x, lambda g: adj(g)[0]))
    if alpha.op != "constant" or alpha.parents:
        parents.append((alpha, lambda g: adj(g)[1]))
    return ad.Node(out, tuple(parents), "em_step")
