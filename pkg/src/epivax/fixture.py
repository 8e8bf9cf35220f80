"""Synthetic Victoria-like surveillance data for tests and the demo pipeline.

The series is built so that the compartment proportions on 2021-10-04 and
2021-12-03 equal the published start states (to six decimals), with a
front-loaded second-dose campaign in between.
"""

from __future__ import annotations

import datetime as _dt

import numpy as np

from . import baseline as B
from .ingest import DoseRecord, RawRecord

POPULATION = 6_555_000
START = "2021-10-04"
DAYS = 81  # through 2021-12-23
BIRTHS_2021 = 75_363
MIGRANTS_Q4 = 13_100
LIFE_MALE, LIFE_FEMALE, MALE_PER_FEMALE = 81.7, 85.7, 0.98


def _largest_remainder(x: np.ndarray, total: int) -> np.ndarray:
    raw = x * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def proportions(days: int = DAYS, tau: float = 40.0, seed: int = 0) -> np.ndarray:
    """Daily proportions ``(days, 8)`` passing through both anchor states."""
    a, b = B.TRAIN_START.to_array(), B.TEST_START.to_array()
    t = np.arange(days, dtype=np.float64)
    u = t / 60.0
    rng = np.random.default_rng(seed)
    out = np.empty((days, 8))
    g = (1 - np.exp(-t / tau)) / (1 - np.exp(-60.0 / tau))
    out[:, 1] = a[1] + (b[1] - a[1]) * g
    # smooth monotone growth for R, D
    h = u + 0.15 * np.sin(np.pi * u) / np.pi
    for k in (6, 7):
        out[:, k] = a[k] + (b[k] - a[k]) * h
    # infectious and exposed: interpolate with a mid-window wave and small jitter
    wave = np.sin(np.pi * np.clip(u, 0, 1))
    for k in (2, 3, 4, 5):
        lin = a[k] + (b[k] - a[k]) * u
        jit = 1 + 0.01 * rng.standard_normal(days)
        jit[[0, 60]] = 1.0
        out[:, k] = np.maximum(lin * (1 + 0.25 * wave) * jit, 0.2 * min(a[k], b[k]))
    out[:, 0] = 1 - out[:, 1:].sum(axis=1)
    out[0], out[60] = a, b
    return out


def make_dataset(seed: int = 0) -> tuple[list[RawRecord], list[DoseRecord], int]:
    props = proportions(seed=seed)
    pop = POPULATION
    counts = np.stack([_largest_remainder(p / p.sum(), pop) for p in props])
    S, V, E, I1, I2, I3, R, D = counts.T
    conf_cum = I1 + I2 + I3 + R + D
    if np.any(np.diff(conf_cum) < 0) or np.any(np.diff(V) < 0):
        raise RuntimeError("fixture construction produced a decreasing cumulative count")
    d0 = _dt.date.fromisoformat(START)
    dates = [(d0 + _dt.timedelta(days=i)).isoformat() for i in range(len(props))]
    # pre-window cumulative offsets so dailies on the first date are plausible
    tests_cum = np.cumsum(E) + 4_000_000
    hosp_cum = np.cumsum(np.maximum(np.diff(I2, prepend=I2[0]), 0) + I2 // 5) + 9_000
    icu_cum = np.cumsum(np.maximum(np.diff(I3, prepend=I3[0]), 0) + I3 // 7) + 1_500
    first = V + np.round(0.08 * pop * np.exp(-np.arange(len(V)) / 25.0)).astype(np.int64)
    first = np.maximum.accumulate(first)
    vacc_cum = first + V
    prev = lambda c: np.diff(c, prepend=c[0] - (c[1] - c[0]))  # noqa: E731
    records = [
        RawRecord(
            date=d, state="VIC",
            confirmed=int(prev(conf_cum)[i]), confirmed_cum=int(conf_cum[i]),
            deaths=int(prev(D)[i]), deaths_cum=int(D[i]),
            tests=int(E[i]), tests_cum=int(tests_cum[i]),
            recovered=int(prev(R)[i]), recovered_cum=int(R[i]),
            hosp=int(I2[i]), hosp_cum=int(hosp_cum[i]),
            vaccines=int(prev(vacc_cum)[i]), vaccines_cum=int(vacc_cum[i]),
            icu=int(I3[i]), icu_cum=int(icu_cum[i]),
        )
        for i, d in enumerate(dates)
    ]
    doses = [DoseRecord(d, int(first[i]), int(V[i])) for i, d in enumerate(dates)]
    return records, doses, pop
