"""Raw surveillance records to compartment proportions, flows and regressions."""

from __future__ import annotations

import csv
import datetime as _dt
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from .epimodel import COMPARTMENTS, CompartmentState, Trajectory

log = logging.getLogger(__name__)

RAW_COLUMNS = (
    "confirmed", "confirmed_cum", "deaths", "deaths_cum", "tests", "tests_cum",
    "recovered", "recovered_cum", "hosp", "hosp_cum", "vaccines", "vaccines_cum",
    "icu", "icu_cum",
)
CUMULATIVE = tuple(c for c in RAW_COLUMNS if c.endswith("_cum"))
DOSE_COLUMNS = ("first_dose_cum", "second_dose_cum")
SPLINE_FACTORS = (1, 5, 10, 20)


class IngestError(ValueError):
    """Bad input data; message carries the offending line or date."""


@dataclass(frozen=True)
class RawRecord:
    date: str
    confirmed: int = 0
    confirmed_cum: int = 0
    deaths: int = 0
    deaths_cum: int = 0
    tests: int = 0
    tests_cum: int = 0
    recovered: int = 0
    recovered_cum: int = 0
    hosp: int = 0
    hosp_cum: int = 0
    vaccines: int = 0
    vaccines_cum: int = 0
    icu: int = 0
    icu_cum: int = 0
    state: str = ""


@dataclass(frozen=True)
class DoseRecord:
    date: str
    first_dose_cum: int
    second_dose_cum: int

    def __post_init__(self):
        if self.second_dose_cum > self.first_dose_cum:
            raise IngestError(f"{self.date}: second doses exceed first doses")


@dataclass
class ParseResult:
    records: list
    missing_cells: int = 0


def _parse_date(s: str) -> str:
    return _dt.date.fromisoformat(s.strip()).isoformat()


def _parse_count(s: str) -> tuple[int, bool]:
    s = s.strip()
    if s == "" or s.lower() in ("na", "nan", "null"):
        return 0, True
    v = float(s)
    if not math.isfinite(v) or v < 0:
        raise ValueError(f"negative or non-finite count {s!r}")
    return int(round(v)), False


def parse_dataset(path, state: str | None = None) -> ParseResult:
    """Read a surveillance CSV with the standard column names (any case).

    Missing numeric cells read as 0 and are counted. Rows with a bad date or a
    negative count raise :class:`IngestError` naming the line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: no header row") from None
        missing_cols = [c for c in ("date", *RAW_COLUMNS) if c not in header]
        if missing_cols:
            raise IngestError(f"{path}: header lacks columns {missing_cols}")
        idx = {c: header.index(c) for c in header}
        out, missing = [], 0
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            row = row + [""] * (len(header) - len(row))
            st = row[idx["state"]].strip() if "state" in idx else ""
            if state is not None and st.lower() != state.lower():
                continue
            try:
                d = _parse_date(row[idx["date"]])
                vals = {}
                for c in RAW_COLUMNS:
                    vals[c], miss = _parse_count(row[idx[c]])
                    missing += miss
            except ValueError as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            out.append(RawRecord(date=d, state=st, **vals))
    out.sort(key=lambda r: r.date)
    if missing:
        log.warning("%s: %d missing numeric cells read as 0", path, missing)
    return ParseResult(out, missing)


def write_dataset(path, records: Iterable[RawRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Date", "State", *(c.capitalize() if c not in ("hosp", "icu") else c.upper() for c in RAW_COLUMNS)])
        for r in records:
            w.writerow([r.date, r.state, *(getattr(r, c) for c in RAW_COLUMNS)])


def parse_doses(path) -> list[DoseRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        reader.fieldnames = [h.strip().lower() for h in reader.fieldnames]
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(DoseRecord(_parse_date(row["date"]), *(_parse_count(row[c])[0] for c in DOSE_COLUMNS)))
            except (ValueError, KeyError) as exc:
                raise IngestError(f"{path}:{lineno}: {exc}") from None
    out.sort(key=lambda r: r.date)
    return out


def write_doses(path, doses: Iterable[DoseRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *DOSE_COLUMNS])
        for d in doses:
            w.writerow([d.date, d.first_dose_cum, d.second_dose_cum])


def _daterange(a: str, b: str) -> list[str]:
    d0, d1 = _dt.date.fromisoformat(a), _dt.date.fromisoformat(b)
    return [(d0 + _dt.timedelta(days=i)).isoformat() for i in range((d1 - d0).days + 1)]


def fill_daily(records: Sequence, zero_daily: bool = True) -> list:
    """Make the series strictly daily; cumulative fields carry forward over gaps."""
    if not records:
        return []
    by = {r.date: r for r in records}
    out, prev = [], None
    for d in _daterange(records[0].date, records[-1].date):
        if d in by:
            prev = by[d]
            out.append(prev)
            continue
        vals = {}
        for f in fields(prev):
            if f.name == "date":
                vals[f.name] = d
            elif f.name.endswith("_cum") or f.name == "state" or not zero_daily:
                vals[f.name] = getattr(prev, f.name)
            else:
                vals[f.name] = 0
        out.append(type(prev)(**vals))
    return out


@dataclass
class CompartmentSeries:
    dates: list[str]
    states: np.ndarray  # (T, 8)
    alpha: np.ndarray  # (T,)
    population: float
    t: np.ndarray | None = None  # days since the first date
    clamped: int = 0  # dates where the mild count was clamped to 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.t is None:
            self.t = np.arange(len(self.dates), dtype=np.float64)
        if self.states.shape != (len(self.dates), 8) or self.alpha.shape != (len(self.dates),):
            raise IngestError("series arrays do not match the date count")
        if np.any(self.states < 0) or np.any(self.alpha < 0):
            raise IngestError("series has negative components")

    def __len__(self) -> int:
        return len(self.dates)

    def state(self, i: int) -> CompartmentState:
        return CompartmentState.from_array(self.states[i])

    def index(self, date: str) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise IngestError(f"date {date} outside series {self.dates[0]}..{self.dates[-1]}") from None

    def slice(self, i: int, j: int) -> "CompartmentSeries":
        return CompartmentSeries(self.dates[i:j], self.states[i:j], self.alpha[i:j], self.population,
                                 self.t[i:j] - (self.t[i] if j > i else 0.0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "t", *COMPARTMENTS, "alpha"])
            for d, t, x, a in zip(self.dates, self.t, self.states, self.alpha):
                w.writerow([d, f"{t:.10g}", *(f"{v:.10g}" for v in x), f"{a:.10g}"])

    @classmethod
    def from_csv(cls, path, population: float = 1.0) -> "CompartmentSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [r["date"] for r in rows],
            [[float(r[c]) for c in COMPARTMENTS] for r in rows],
            [float(r["alpha"]) for r in rows],
            population,
            np.array([float(r["t"]) for r in rows]),
        )

    def to_trajectory(self) -> Trajectory:
        return Trajectory(self.states.copy(), self.alpha[:-1].copy(), float(self.t[1] - self.t[0]) if len(self) > 1 else 1.0)


def build_compartments(records: Sequence[RawRecord], doses: Sequence[DoseRecord], population: float,
                       exposed_scale: float = 1.0) -> CompartmentSeries:
    """Proportions per date plus the observed vaccination rate.

    ``alpha[i]`` is the second doses given between dates ``i`` and ``i+1``
    divided by the susceptible count on date ``i``; the last value carries
    forward.
    """
    if not population > 0:
        raise IngestError(f"population must be positive, got {population}")
    records = fill_daily(list(records))
    if not records:
        raise IngestError("no records")
    dose_by = {d.date: d for d in fill_daily(list(doses), zero_daily=False)}
    last_dose = 0
    rows, clamped = [], 0
    for r in records:
        if r.date in dose_by:
            last_dose = dose_by[r.date].second_dose_cum
        active = r.confirmed_cum - r.recovered_cum - r.deaths_cum - r.hosp - r.icu
        if active < 0:
            clamped += 1
            active = 0
        counts = [r.tests * exposed_scale, active, r.hosp, r.icu, r.recovered_cum, r.deaths_cum]
        if max(counts + [last_dose]) > population:
            raise IngestError(f"{r.date}: a count exceeds the population {population}")
        E, I1, I2, I3, R, D = counts
        S = population - last_dose - E - I1 - I2 - I3 - R - D
        if S < 0:
            raise IngestError(f"{r.date}: compartments exceed the population")
        rows.append([S, last_dose, E, I1, I2, I3, R, D])
    if clamped:
        log.warning("mild infectious count clamped to 0 on %d dates", clamped)
    counts = np.array(rows, dtype=np.float64)
    vcount = counts[:, 1]
    alpha = np.zeros(len(records))
    if len(records) > 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.diff(vcount) / counts[:-1, 0]
        alpha[:-1] = np.where(counts[:-1, 0] > 0, np.maximum(a, 0.0), 0.0)
        alpha[-1] = alpha[-2]
    return CompartmentSeries([r.date for r in records], counts / population, alpha, population, clamped=clamped)


@dataclass
class FlowDecomposition:
    dates: list[str]
    inflows: np.ndarray  # (T-1, 3), for dates[1:]
    p1_obs: np.ndarray  # (T-1,), nan where I1 at the prior date is 0
    skipped: list[str] = field(default_factory=list)


def decompose_flows(series: CompartmentSeries) -> FlowDecomposition:
    if len(series) < 2:
        raise IngestError("need at least two dates to decompose flows")
    I = series.states[:, 3:6]
    R = series.states[:, 6]
    dI = np.diff(I, axis=0)
    dR = np.diff(R)
    tot = I[1:].sum(axis=1)
    skipped = [series.dates[i + 1] for i in np.flatnonzero(tot <= 0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(tot[:, None] > 0, I[1:] / tot[:, None], 0.0)
    inflow = np.maximum(0.0, dI + share * dR[:, None])
    inflow[tot <= 0] = 0.0
    prev_i1 = I[:-1, 0]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        p1 = np.where((prev_i1 > 0) & (tot > 0), inflow[:, 1] / prev_i1, np.nan)
    return FlowDecomposition(series.dates[1:], inflow, p1, skipped)


@dataclass(frozen=True)
class RegressionFit:
    intercept: float
    slope: float
    p_value: float
    r_squared: float
    n: int
    slope_se: float = float("nan")
    intercept_se: float = float("nan")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def ols(x, y) -> RegressionFit:
    """Simple linear regression of ``y`` on ``x`` with a two-sided t-test on the slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = len(x)
    if n < 3:
        raise IngestError(f"need at least 3 observations, got {n}")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 0:
        raise IngestError("vaccination rate has zero variance; slope undefined")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    sse = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    s2 = sse / (n - 2)
    se = math.sqrt(s2 / sxx)
    ise = math.sqrt(s2 * (1.0 / n + xm**2 / sxx))
    if se > 0:
        p = float(2 * stats.t.sf(abs(slope) / se, n - 2))
    else:
        p = 0.0 if slope != 0 else 1.0
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    return RegressionFit(float(intercept), float(slope), min(max(p, 0.0), 1.0), float(r2), n, se, ise)


def fit_hospitalization_regression(flows: FlowDecomposition, alpha_obs) -> RegressionFit:
    """OLS of observed p1 on the vaccination rate applied over the same day.

    ``alpha_obs`` is the series' per-date rate; p1 at date ``t`` pairs with
    the rate at ``t-1``.
    """
    a = np.asarray(alpha_obs, dtype=np.float64)
    if len(a) != len(flows.p1_obs) + 1:
        raise IngestError("alpha series length must be one more than the flow count")
    return ols(a[:-1], flows.p1_obs)


def compute_vital_rates(births_per_year: float, migrants_per_quarter: float, population: float,
                        male_life: float, female_life: float, male_per_female: float,
                        days_per_quarter: float = 92.0) -> tuple[float, float]:
    """(Lambda, zeta): daily inflow from births and net migration, and inverse mean lifespan."""
    for name, v in locals().items():
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    lam = births_per_year / population / 365.0 + migrants_per_quarter / population / days_per_quarter
    w = 1.0 + male_per_female
    life = male_life * male_per_female / w + female_life / w
    return lam, 1.0 / (life * 365.0)


def split_train_test(series: CompartmentSeries, train_start: str, train_end: str,
                     test_end: str) -> tuple[CompartmentSeries, CompartmentSeries]:
    if not (train_start <= train_end <= test_end):
        raise IngestError(f"dates out of order: {train_start}, {train_end}, {test_end}")
    i, j, k = series.index(train_start), series.index(train_end), series.index(test_end)
    return series.slice(i, j + 1), series.slice(j + 1, k + 1)


def augment_cubic_spline(series: CompartmentSeries, k: int) -> CompartmentSeries:
    """Natural cubic spline per compartment with ``k`` samples per interval.

    Knots are reproduced exactly, negative interpolants clamp to 0 and the
    vaccination rate is held piecewise constant.
    """
    if k not in SPLINE_FACTORS:
        raise IngestError(f"augmentation factor must be one of {SPLINE_FACTORS}, got {k}")
    n = len(series)
    if n < 4:
        raise IngestError(f"series too short for splines ({n} < 4)")
    if k == 1:
        return series.slice(0, n)
    t = series.t
    fine = np.concatenate([np.linspace(t[i], t[i + 1], k, endpoint=False) for i in range(n - 1)] + [t[-1:]])
    states = np.maximum(CubicSpline(t, series.states, axis=0, bc_type="natural")(fine), 0.0)
    states[::k] = series.states
    alpha = np.repeat(series.alpha[:-1], k)
    alpha = np.append(alpha, series.alpha[-1])
    dates = [series.dates[i // k] if i % k == 0 else f"{series.dates[i // k]}+{i % k}/{k}" for i in range(len(fine))]
    return CompartmentSeries(dates, states, alpha, series.population, fine)
