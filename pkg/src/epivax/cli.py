"""Command-line pipeline: ingest, calibrate, optimize, sweep, report.

Every command reads one JSON config (``--config``), lets flags override it,
and writes stable filenames under ``--out``. Exit codes: 0 success, 2 input
error, 3 numerical failure, 4 config error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("epivax")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "data": {
        "fixture": True,
        "dataset": None,
        "doses": None,
        "state": "VIC",
        "population": 6_555_000,
        "exposed_scale": 1.0,
    },
    "dates": {"train_start": "2021-10-04", "train_end": "2021-12-02", "test_end": "2021-12-23"},
    "vital": {
        "births_per_year": 75_363,
        "migrants_per_quarter": 13_100,
        "male_life": 81.7,
        "female_life": 85.7,
        "male_per_female": 0.98,
    },
    "calibration": {"fits": ["deterministic", "stochastic"], "eval_paths": 200},
    "control": {"parameters": "baseline", "hosp_link": "baseline", "eval_paths": 500},
    "costs": {},
    "sweeps": [{"target": "noise"}, {"target": "infection"}],
}

DESK_CAPS = {"epochs": 20_000, "iterations": 2_000}


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---- configuration ----

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("calibration", "control", "costs"):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        elif isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def resolve_config(doc: dict, mode: str, seed: int | None) -> dict:
    """Fill defaults, apply mode presets and flags; the result is echoed into every artifact."""
    from dataclasses import fields

    from .calibrate import CalibrationConfig
    from .control import ControlConfig
    from .costmodel import CostParams

    cfg = _merge(DEFAULT_CONFIG, doc)
    cfg["mode"] = mode
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", doc.get("seed", 0))

    cal_keys = {f.name for f in fields(CalibrationConfig)}
    ctl_keys = {f.name for f in fields(ControlConfig)}
    cal_extra = {"fits", "eval_paths"}
    ctl_extra = {"parameters", "hosp_link", "eval_paths", "estimate"}
    for name, known in (("calibration", cal_keys | cal_extra), ("control", ctl_keys | ctl_extra)):
        bad = set(cfg[name]) - known
        if bad:
            raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
    cal = {k: v for k, v in cfg["calibration"].items() if k in cal_keys}
    ctl = {k: v for k, v in cfg["control"].items() if k in ctl_keys}
    cal.setdefault("seed", cfg["seed"])
    ctl.setdefault("seed", cfg["seed"])
    try:
        if mode == "paper":
            cc, oc = CalibrationConfig.paper(**cal), ControlConfig.paper(**ctl)
        else:
            cc, oc = CalibrationConfig(**cal), ControlConfig.desk(**ctl)
            if cc.epochs > DESK_CAPS["epochs"] or oc.iterations > DESK_CAPS["iterations"]:
                log.warning("desk mode caps epochs at %d and iterations at %d", DESK_CAPS["epochs"],
                            DESK_CAPS["iterations"])
                from dataclasses import replace

                cc = replace(cc, epochs=min(cc.epochs, DESK_CAPS["epochs"]))
                oc = replace(oc, iterations=min(oc.iterations, DESK_CAPS["iterations"]))
        cp = CostParams(**cfg["costs"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg["calibration"] = {**cc.to_dict(), **{k: cfg["calibration"].get(k, DEFAULT_CONFIG["calibration"].get(k))
                                             for k in cal_extra}}
    cfg["control"] = {**oc.to_dict(), **{k: cfg["control"].get(k, DEFAULT_CONFIG["control"].get(k))
                                         for k in ctl_extra}}
    cfg["costs"] = cp.to_dict()
    for fit in cfg["calibration"]["fits"]:
        if fit not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown fit kind {fit!r}")
    if cfg["control"]["parameters"] not in ("baseline", "deterministic", "stochastic"):
        raise ConfigError("control.parameters must be baseline, deterministic or stochastic")
    hl = cfg["control"]["hosp_link"]
    if not (hl in ("baseline", "regression") or (isinstance(hl, list) and len(hl) == 2)):
        raise ConfigError("control.hosp_link must be 'baseline', 'regression' or [intercept, slope]")
    return cfg


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return doc


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---- commands ----

def _input_paths(cfg: dict, out: Path) -> tuple[Path, Path]:
    from . import fixture
    from .ingest import write_dataset, write_doses

    d = cfg["data"]
    if d["dataset"] is None:
        if not d["fixture"]:
            raise ConfigError("data.dataset is required when data.fixture is false")
        inp = out / "input"
        inp.mkdir(parents=True, exist_ok=True)
        records, doses, _ = fixture.make_dataset(cfg["seed"])
        write_dataset(inp / "dataset.csv", records)
        write_doses(inp / "doses.csv", doses)
        return inp / "dataset.csv", inp / "doses.csv"
    paths = Path(d["dataset"]), Path(d["doses"]) if d["doses"] else None
    for p in paths:
        if p is None:
            raise ConfigError("data.doses is required with data.dataset")
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
    return paths


def cmd_ingest(cfg: dict, out: Path) -> None:
    from .ingest import (
        build_compartments,
        compute_vital_rates,
        decompose_flows,
        fit_hospitalization_regression,
        parse_dataset,
        parse_doses,
    )

    ds, dp = _input_paths(cfg, out)
    parsed = parse_dataset(ds, cfg["data"]["state"])
    doses = parse_doses(dp)
    series = build_compartments(parsed.records, doses, cfg["data"]["population"], cfg["data"]["exposed_scale"])
    series.to_csv(out / "series.csv")
    flows = decompose_flows(series)
    with open(out / "flows.csv", "w") as fh:
        fh.write("date,inflow_I1,inflow_I2,inflow_I3,p1_obs\n")
        for i, d in enumerate(flows.dates):
            fh.write(",".join([d, *(f"{v:.10g}" for v in flows.inflows[i]), f"{flows.p1_obs[i]:.10g}"]) + "\n")
    fit = fit_hospitalization_regression(flows, series.alpha)
    lam, zeta = compute_vital_rates(population=cfg["data"]["population"], **cfg["vital"])
    _dump(out / "regression.json", {
        "intercept": fit.intercept, "slope": fit.slope, "p_value": fit.p_value, "r2": fit.r_squared, "n": fit.n,
        "missing_cells": parsed.missing_cells, "clamped_I1": series.clamped, "skipped_dates": flows.skipped,
        "Lambda": lam, "zeta": zeta, "config": _echo(cfg),
    })


def _load_series(out: Path):
    from .ingest import CompartmentSeries

    p = out / "series.csv"
    if not p.is_file():
        raise InputError(f"series file not found: {p} (run 'epivax ingest' first)")
    return CompartmentSeries.from_csv(p)


def _vital(out: Path, cfg: dict) -> tuple[float, float]:
    from .ingest import compute_vital_rates

    p = out / "regression.json"
    if p.is_file():
        doc = json.loads(p.read_text())
        return doc["Lambda"], doc["zeta"]
    return compute_vital_rates(population=cfg["data"]["population"], **cfg["vital"])


def _split(series, cfg):
    from .ingest import split_train_test

    d = cfg["dates"]
    return split_train_test(series, d["train_start"], d["train_end"], d["test_end"])


def cmd_calibrate(cfg: dict, out: Path) -> None:
    from .calibrate import CalibrationConfig, evaluate_fit, fit_deterministic, fit_stochastic

    series = _load_series(out)
    train, test = _split(series, cfg)
    lam, zeta = _vital(out, cfg)
    cal = dict(cfg["calibration"])
    n_eval = cal.pop("eval_paths")
    fits = cal.pop("fits")
    cc = CalibrationConfig(**{**cal, "hidden": tuple(cal["hidden"])})
    metrics = {}
    for kind in fits:
        fn = fit_deterministic if kind == "deterministic" else fit_stochastic
        est = fn(train, cc, Lambda=lam, zeta=zeta)
        doc = est.to_json_dict(f"history_{kind}.csv")
        doc["config"] = _echo(cfg)
        est.save(out / f"estimate_{kind}.json", out / f"history_{kind}.csv")
        _dump(out / f"estimate_{kind}.json", doc)
        metrics[kind] = evaluate_fit(est, test, n_paths=n_eval, seed=cfg["seed"]).to_dict()
    _dump(out / "metrics.json", {"test": metrics, "config": _echo(cfg)})


def _scenario(cfg: dict, out: Path):
    from dataclasses import replace

    import numpy as np

    from . import baseline as B
    from .analysis import Scenario
    from .calibrate import estimate_from_json
    from .control import bounds_from_series
    from .costmodel import CostParams
    from .epimodel import HospitalizationLink

    series = _load_series(out)
    train, _ = _split(series, cfg)
    ctl = cfg["control"]
    steps = int(round(ctl["horizon"] / ctl["dt"]))
    if len(train.alpha) < steps:
        raise InputError(f"training window has {len(train.alpha)} rates, the horizon needs {steps}")
    alpha_obs = train.alpha[:steps]

    hl = ctl["hosp_link"]
    if hl == "baseline":
        link = B.HOSP_LINK
    elif hl == "regression":
        p = out / "regression.json"
        if not p.is_file():
            raise InputError(f"regression file not found: {p}")
        doc = json.loads(p.read_text())
        link = HospitalizationLink(doc["intercept"], doc["slope"])
    else:
        link = HospitalizationLink(float(hl[0]), float(hl[1]))

    if ctl["parameters"] == "baseline":
        params, noise = replace(B.PARAMS, hosp_link=link), B.NOISE
    else:
        p = out / f"estimate_{ctl['parameters']}.json"
        if not p.is_file():
            raise InputError(f"estimate file not found: {p} (run 'epivax calibrate' first)")
        params, noise = estimate_from_json(json.loads(p.read_text()), link)
        noise = noise or B.NOISE
    bounds = tuple(ctl["bounds"]) if ctl["bounds"] else bounds_from_series(alpha_obs)
    scn = Scenario(np.array(train.states[0]), params, noise, CostParams(**cfg["costs"]), bounds,
                   float(np.mean(alpha_obs)))
    return scn, alpha_obs


def _control_config(cfg: dict, bounds):
    from .control import ControlConfig

    ctl = {k: v for k, v in cfg["control"].items() if k not in ("parameters", "hosp_link", "eval_paths", "estimate")}
    ctl["hidden"] = tuple(ctl["hidden"])
    ctl["bounds"] = tuple(bounds)
    return ControlConfig(**ctl)


def cmd_optimize(cfg: dict, out: Path) -> None:
    from .analysis import write_comparison
    from .control import (
        actual_strategy,
        constant_strategy,
        evaluate_strategy,
        optimal_strategy,
        pooled_se,
        save_policies,
        train_policy,
        write_alpha_csv,
        zero_strategy,
    )

    scn, alpha_obs = _scenario(cfg, out)
    cc = _control_config(cfg, scn.bounds)
    icfg = cc.integrator
    pols, hists = [], []
    for run in range(cc.runs):
        res = train_policy(scn.x0, scn.params, scn.noise, scn.costs, cc, run=run)
        pols.append(res.policy)
        hists.append(res.history)
    save_policies(out / "policy.json", pols, {"config": _echo(cfg)})
    with open(out / "control_loss.csv", "w") as fh:
        fh.write("iteration," + ",".join(f"run{r}" for r in range(len(hists))) + "\n")
        for i in range(len(hists[0])):
            fh.write(f"{i}," + ",".join(f"{h[i]:.10g}" for h in hists) + "\n")
    n, seed = cfg["control"]["eval_paths"], cfg["seed"]
    strategies = [optimal_strategy(pols), actual_strategy(alpha_obs, icfg.steps),
                  constant_strategy(scn.constant_rate), zero_strategy()]
    results = [evaluate_strategy(s, scn.x0, scn.params, scn.noise, scn.costs, icfg, n, seed) for s in strategies]
    write_comparison(out, results, _echo(cfg))
    for r in results:
        write_alpha_csv(out / f"alpha_{r.name}.csv", r.alpha_path)
    _dump(out / "optimize.json", {
        "strategies": {r.name: {**r.expected.mean.to_dict(), "total_se": r.total_se,
                                "alpha_path": [float(a) for a in r.alpha_path]} for r in results},
        "pooled_se": {f"{a.name}-{b.name}": pooled_se(a, b) for a, b in zip(results, results[1:])},
        "scenario": scn.to_dict(),
        "eval_paths": n,
        "config": _echo(cfg),
    })


def cmd_sweep(cfg: dict, out: Path) -> None:
    from .analysis import SweepSpec, run_sweep, write_sweep

    scn, _ = _scenario(cfg, out)
    cc = _control_config(cfg, scn.bounds)
    specs = []
    for s in cfg["sweeps"]:
        try:
            specs.append(SweepSpec(s["target"], tuple(s["levels"])) if "levels" in s else SweepSpec.default(s["target"]))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad sweep entry {s}: {exc}") from None
    if not specs:
        raise ConfigError("no sweeps configured")
    ok = 0
    for spec in specs:
        res = run_sweep(spec, scn, cc, cfg["control"]["eval_paths"], cfg["seed"])
        write_sweep(out, res, _echo(cfg))
        ok += len(res.succeeded)
        for f in res.failed:
            print(f"sweep {spec.target} level {f.level:g} failed: {f.reason}", file=sys.stderr)
    if ok == 0:
        raise NumericFailure("every sweep level failed")


class NumericFailure(RuntimeError):
    pass


def cmd_report(cfg: dict, out: Path) -> None:
    """Summarise existing artifacts into one markdown file."""
    lines = ["# epivax report", ""]
    p = out / "metrics.json"
    if p.is_file():
        m = json.loads(p.read_text())["test"]
        lines += ["## Calibration (test set)", "", "| fit | MSE | MAE |", "|---|---|---|"]
        lines += [f"| {k} | {v['mse']:.6g} | {v['mae']:.6g} |" for k, v in sorted(m.items())]
        lines.append("")
    p = out / "optimize.json"
    if p.is_file():
        doc = json.loads(p.read_text())
        lines += ["## Strategy comparison", "", "| strategy | policy | healthcare | economic | total | SE |",
                  "|---|---|---|---|---|---|"]
        for name, s in doc["strategies"].items():
            lines.append(f"| {name} | {s['policy']:.4f} | {s['healthcare']:.4f} | {s['economic']:.4f} | "
                         f"{s['total']:.4f} | {s['total_se']:.4f} |")
        lines.append("")
    for p in sorted(out.glob("sweep_*.json")):
        doc = json.loads(p.read_text())
        lines += [f"## Sweep: {doc['spec']['target']}", "", "| level | optimal total | constant total | savings |",
                  "|---|---|---|---|"]
        for e in doc["levels"]:
            if e["status"] == "ok":
                lines.append(f"| {e['level']:g} | {e['optimal']['total']:.4f} | {e['constant']['total']:.4f} | "
                             f"{e['savings']['total']:.4f} |")
            else:
                lines.append(f"| {e['level']:g} | failed: {e['reason']} | | |")
        lines.append("")
    if len(lines) == 2:
        raise InputError(f"no artifacts to report in {out}")
    (out / "report.md").write_text("\n".join(lines))


COMMANDS = {
    "ingest": cmd_ingest,
    "calibrate": cmd_calibrate,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "out"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epivax", description="Epidemic calibration and vaccination-policy pipeline.")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--out", default="out", help="output directory (default: out)")
    shared.add_argument("--seed", type=int, help="master seed (required for optimize and sweep)")
    shared.add_argument("--mode", choices=("desk", "paper"), default="desk")
    shared.add_argument("--threads", type=int, default=1, help="cap on numerical worker threads")
    shared.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[shared], help=(fn.__doc__ or name).strip().splitlines()[0])
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    if args.command in ("optimize", "sweep") and args.seed is None:
        print(f"error: --seed is required for {args.command}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG

    from .calibrate import CalibrationDivergence
    from .control import ControlDivergence
    from .ingest import IngestError

    out = Path(args.out)
    try:
        cfg = resolve_config(load_config(args.config), args.mode, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / f"config_{args.command}.json", _echo(cfg))
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, IngestError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalibrationDivergence as exc:
        print(f"numerical failure: calibration diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ControlDivergence as exc:
        print(f"numerical failure: control training diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
