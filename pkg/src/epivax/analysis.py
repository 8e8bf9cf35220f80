"""Sensitivity sweeps, savings against the constant strategy, and report files.

Every sweep level retrains the control policy from a seed derived from
(master seed, level index); all levels and strategies are evaluated on the
same common-random-number ensemble drawn from the master seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from .control import (
    ControlConfig,
    RolloutResult,
    constant_strategy,
    evaluate_strategy,
    optimal_strategy,
    pooled_se,
    train_policy,
)
from .costmodel import CSV_HEADER, CostBreakdown, CostParams
from .epimodel import EpidemicParams, NoiseIntensities

log = logging.getLogger(__name__)

TARGETS = ("noise", "infection", "c1", "c6", "hesitancy", "stage")
SWEEP_HEADER = ("level", "policy_cost", "healthcare_cost", "economic_cost", "total")
SAVINGS_HEADER = ("level", "policy_savings", "healthcare_savings", "economic_savings")

# levels examined in the sensitivity study (the 1.0 multiplier is the base case)
DEFAULT_LEVELS = {
    "noise": (0.1, 0.5, 1.0, 2.0),
    "infection": (0.1, 0.5, 1.0, 1.5),
    "c1": (0.1, 0.5, 1.0, 2.0),
    "c6": (0.1, 0.5, 1.0, 2.0),
    "hesitancy": (0.7, 0.85, 1.0, 1.15),
    "stage": (0.25, 0.75, 0.80, 0.85, 0.90, 0.95),
}


class InfeasibleLevel(ValueError):
    """A sweep level describes a scenario the model cannot represent."""


class ReportError(OSError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    """``levels`` are multipliers, except for ``stage`` where they are vaccinated shares."""

    target: str
    levels: tuple[float, ...]

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown sweep target {self.target!r}; expected one of {TARGETS}")
        lv = tuple(float(v) for v in self.levels)
        if not lv:
            raise ValueError("a sweep needs at least one level")
        for v in lv:
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"sweep levels must be finite and > 0, got {v}")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def default(cls, target: str) -> "SweepSpec":
        return cls(target, DEFAULT_LEVELS[target])

    def to_dict(self) -> dict:
        return {"target": self.target, "levels": list(self.levels)}


@dataclass(frozen=True)
class Scenario:
    """Everything a control run needs."""

    x0: np.ndarray
    params: EpidemicParams
    noise: NoiseIntensities
    costs: CostParams
    bounds: tuple[float, float]
    constant_rate: float

    def to_dict(self) -> dict:
        return {
            "x0": [float(v) for v in self.x0],
            "params": self.params.to_dict(),
            "noise": list(self.noise.sigmas),
            "costs": self.costs.to_dict(),
            "bounds": list(self.bounds),
            "constant_rate": self.constant_rate,
        }


def apply_level(target: str, base: Scenario, level: float) -> Scenario:
    """The base scenario modified by one sweep level."""
    if target == "noise":
        return replace(base, noise=base.noise.scaled(level))
    if target == "infection":
        return replace(base, params=base.params.scaled_betas(level))
    if target == "c1":
        return replace(base, costs=replace(base.costs, c1=base.costs.c1 * level))
    if target == "c6":
        return replace(base, costs=replace(base.costs, c6=base.costs.c6 * level))
    if target == "hesitancy":
        lo, hi = base.bounds
        hi = hi * level
        if hi < lo:
            raise InfeasibleLevel(f"alpha_max {hi:.6g} falls below alpha_min {lo:.6g}")
        return replace(base, bounds=(lo, hi), constant_rate=min(max(base.constant_rate, lo), hi))
    if target == "stage":
        if level > 1:
            raise InfeasibleLevel(f"vaccinated share {level} exceeds 1")
        x = np.array(base.x0, dtype=np.float64)
        s = x[0] - (level - x[1])
        if s < 0:
            raise InfeasibleLevel(f"vaccinated share {level} leaves a negative susceptible share")
        x[0], x[1] = s, level
        return replace(base, x0=x)
    raise ValueError(f"unknown sweep target {target!r}")


def level_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def savings_vs_constant(optimal: RolloutResult, constant: RolloutResult) -> CostBreakdown:
    """Constant-strategy cost minus optimal-strategy cost, per component."""
    if optimal.master_seed != constant.master_seed or optimal.n_paths != constant.n_paths:
        raise ValueError("savings need both strategies evaluated on the same noise ensemble "
                         f"(seeds {optimal.master_seed} vs {constant.master_seed}, "
                         f"paths {optimal.n_paths} vs {constant.n_paths})")
    return constant.expected.mean - optimal.expected.mean


@dataclass
class LevelResult:
    level: float
    seed: int
    alpha_path: np.ndarray
    optimal: RolloutResult
    constant: RolloutResult
    loss_histories: list[np.ndarray] = field(default_factory=list)

    @property
    def savings(self) -> CostBreakdown:
        return savings_vs_constant(self.optimal, self.constant)


@dataclass
class LevelFailure:
    level: float
    reason: str


@dataclass
class SweepResult:
    spec: SweepSpec
    entries: list  # LevelResult | LevelFailure, in input order
    eval_seed: int
    n_paths: int

    @property
    def succeeded(self) -> list[LevelResult]:
        return [e for e in self.entries if isinstance(e, LevelResult)]

    @property
    def failed(self) -> list[LevelFailure]:
        return [e for e in self.entries if isinstance(e, LevelFailure)]


def run_level(scn: Scenario, cfg: ControlConfig, n_paths: int, eval_seed: int, train_seed: int,
              callback: Callable | None = None) -> LevelResult:
    cfg = replace(cfg, bounds=scn.bounds, seed=train_seed)
    icfg = cfg.integrator
    pols, hists = [], []
    for run in range(cfg.runs):
        res = train_policy(scn.x0, scn.params, scn.noise, scn.costs, cfg, run=run, callback=callback)
        pols.append(res.policy)
        hists.append(res.history)
    opt = evaluate_strategy(optimal_strategy(pols), scn.x0, scn.params, scn.noise, scn.costs, icfg, n_paths, eval_seed)
    const = evaluate_strategy(constant_strategy(scn.constant_rate), scn.x0, scn.params, scn.noise, scn.costs, icfg,
                              n_paths, eval_seed)
    return LevelResult(float("nan"), train_seed, opt.alpha_path, opt, const, hists)


def run_sweep(spec: SweepSpec, base: Scenario, cfg: ControlConfig, n_paths: int, seed: int,
              callback: Callable | None = None) -> SweepResult:
    entries = []
    for i, level in enumerate(spec.levels):
        try:
            scn = apply_level(spec.target, base, level)
            res = run_level(scn, cfg, n_paths, seed, level_seed(seed, i), callback)
            res.level = level
            entries.append(res)
        except (InfeasibleLevel, FloatingPointError) as exc:
            log.warning("sweep %s level %g failed: %s", spec.target, level, exc)
            entries.append(LevelFailure(level, str(exc)))
    return SweepResult(spec, entries, int(seed), n_paths)


def monotone_within_se(results: Sequence[RolloutResult], k: float = 1.0) -> list[bool]:
    """For each consecutive pair: later total - earlier total > -k pooled SE."""
    return [b.total - a.total > -k * pooled_se(a, b) for a, b in zip(results, results[1:])]


# ---- report ----

def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _save_svg(fig: Figure, path: Path, config: dict | None) -> None:
    import matplotlib

    meta = {"Date": None, "Creator": "epivax"}
    if config is not None:
        meta["Description"] = json.dumps(config, sort_keys=True)
    with matplotlib.rc_context({"svg.hashsalt": "epivax", "svg.fonttype": "none"}):
        FigureCanvasSVG(fig).print_svg(str(path), metadata=meta)


def _alpha_figure(paths: Sequence[tuple[str, np.ndarray]], title: str) -> Figure:
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot()
    for label, a in paths:
        ax.plot(np.arange(len(a)), a, label=label, linewidth=1.4)
    ax.set_xlabel("day")
    ax.set_ylabel("vaccination rate (/day)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _cost_figure(labels: Sequence[str], breakdowns: Sequence[CostBreakdown], title: str) -> Figure:
    fig = Figure(figsize=(6.4, 4.0))
    ax = fig.add_subplot()
    x = np.arange(len(labels))
    bottom = np.zeros(len(labels))
    for name, vals in (("policy", [b.policy for b in breakdowns]),
                       ("healthcare", [b.healthcare for b in breakdowns]),
                       ("economic", [b.economic for b in breakdowns])):
        vals = np.asarray(vals)
        ax.bar(x, vals, bottom=bottom, label=name, width=0.6)
        bottom = bottom + vals
    ax.set_xticks(x, labels)
    ax.set_ylabel("expected expenditure")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"cannot write report files to {out}: {exc.strerror or exc}") from None
    return out


def write_comparison(out_dir, results: Sequence[RolloutResult], config: dict | None = None) -> list[Path]:
    """Strategy comparison table and figures."""
    if not results:
        raise ValueError("no strategy results to report")
    out = _prepare(out_dir)
    paths = [out / "strategy_comparison.csv", out / "strategy_alpha.svg", out / "strategy_costs.svg"]
    _write_csv(paths[0], CSV_HEADER, [r.expected.mean.csv_row(r.name) for r in results])
    _save_svg(_alpha_figure([(r.name, r.alpha_path) for r in results], "vaccination rate by strategy"), paths[1], config)
    _save_svg(_cost_figure([r.name for r in results], [r.expected.mean for r in results], "expenditure by strategy"),
              paths[2], config)
    return paths


def write_sweep(out_dir, sweep: SweepResult, config: dict | None = None) -> list[Path]:
    ok = sweep.succeeded
    if not sweep.entries:
        raise ValueError("empty sweep")
    out = _prepare(out_dir)
    t = sweep.spec.target
    paths = [out / f"sweep_{t}.csv", out / f"savings_{t}.csv", out / f"sweep_{t}.json"]
    _write_csv(paths[0], SWEEP_HEADER, [[_fmt(e.level), *e.optimal.expected.mean.csv_row("")[1:]] for e in ok])
    _write_csv(paths[1], SAVINGS_HEADER,
               [[_fmt(e.level), _fmt(e.savings.policy), _fmt(e.savings.healthcare), _fmt(e.savings.economic)]
                for e in ok])
    doc = {
        "spec": sweep.spec.to_dict(),
        "eval_seed": sweep.eval_seed,
        "n_paths": sweep.n_paths,
        "levels": [
            {"level": e.level, "status": "ok", "train_seed": e.seed,
             "optimal": e.optimal.expected.mean.to_dict(), "optimal_total_se": e.optimal.total_se,
             "constant": e.constant.expected.mean.to_dict(), "constant_total_se": e.constant.total_se,
             "savings": e.savings.to_dict(), "alpha_path": [float(a) for a in e.alpha_path]}
            if isinstance(e, LevelResult) else {"level": e.level, "status": "failed", "reason": e.reason}
            for e in sweep.entries
        ],
        "config": config,
    }
    paths[2].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if ok:
        labels = [f"{t} {e.level:g}" for e in ok]
        svg_a, svg_c = out / f"sweep_{t}_alpha.svg", out / f"sweep_{t}_costs.svg"
        _save_svg(_alpha_figure([(lb, e.alpha_path) for lb, e in zip(labels, ok)], f"optimal rate, {t} sweep"),
                  svg_a, config)
        _save_svg(_cost_figure([f"{e.level:g}" for e in ok], [e.optimal.expected.mean for e in ok],
                               f"optimal expenditure, {t} sweep"), svg_c, config)
        paths += [svg_a, svg_c]
    return paths


def emit_report(out_dir, comparison: Sequence[RolloutResult] = (), sweeps: Sequence[SweepResult] = (),
                config: dict | None = None) -> list[Path]:
    """CSV tables and SVG figures for a strategy comparison and any sweeps.

    Output bytes depend only on the inputs.
    """
    if not comparison and not sweeps:
        raise ValueError("nothing to report")
    written = []
    if comparison:
        written += write_comparison(out_dir, comparison, config)
    for sw in sweeps:
        written += write_sweep(out_dir, sw, config)
    return written
