"""Command-line front end: calibrate models, run simulations, emit reports.

Reports are JSON first (stable field names, deterministic byte-for-byte
given the same config and input bytes: keys sorted, floats in shortest
round-trip form) with a human-oriented text rendering of the same numbers.
Term structures are reported with step interpolation. Exit status is 0 on
success and nonzero with a machine-readable error object otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__, joint, mrcal, simulate, spotprompt, stats, timeseries

log = logging.getLogger("enercal")

_COMMANDS = ("calibrate-mr", "calibrate-bs", "calibrate-sp", "calibrate-joint",
             "simulate", "selftest")


@dataclass
class RunConfig:
    command: str
    inputs: list = field(default_factory=list)        # (label, path, column)
    sp_inputs: list = field(default_factory=list)     # (label, spot(path,col), index(path,col))
    model: str = "lognormal"
    vol_granularity: str = "monthly"
    corr_granularity: str = "flat"
    alpha: float = 0.05
    trim_pct: float = 0.0
    unbiased: bool = True
    seed: int = 1
    n_paths: int = 1000
    grid: str | None = None
    roll_dates: str | None = None
    sim_spec: str | None = None
    curve: str | None = None
    out: str | None = None
    out_paths: str | None = None
    paths_format: str = "csv"
    report_format: str = "json"

    def validate(self):
        if self.command not in _COMMANDS:
            raise timeseries.DataError(f"unknown command {self.command!r}")
        if not 0.0 < self.alpha < 1.0:
            raise timeseries.DataError("alpha must be in (0, 1)")
        if not 0.0 <= self.trim_pct <= 0.05:
            raise timeseries.DataError("trim fraction must be in [0, 0.05]")
        if self.n_paths < 1:
            raise timeseries.DataError("path count must be >= 1")


# --- report helpers ----------------------------------------------------------

def _fnum(x) -> float:
    """Finite float for the report; non-finite values are rejected upstream."""
    x = float(x)
    if not math.isfinite(x):
        raise timeseries.DataError("attempted to report a non-finite number")
    return x


def _null_with_reason(reason: str) -> dict:
    return {"value": None, "reason": reason}


def _month_key(m: int) -> str:
    return f"{m:02d}"


def _my_key(key: tuple[int, int]) -> str:
    m, y = key
    return f"{y:04d}-{m:02d}"


def _parse_my_key(text: str) -> tuple[int, int]:
    y, m = text.split("-")
    return int(m), int(y)


def _bucket_key(key) -> str:
    if isinstance(key, int):
        return _month_key(key)
    return str(key)


def _interval_dict(iv: stats.Interval, n: int | None = None) -> dict:
    out = {"estimate": _fnum(iv.estimate), "lower": _fnum(iv.lower),
           "upper": _fnum(iv.upper)}
    if n is not None:
        out["n"] = int(n)
    return out


def _fit_report_dict(rep: stats.FitReport) -> dict:
    return {"mean": _fnum(rep.mean), "stddev": _fnum(rep.stddev),
            "skewness": _fnum(rep.skewness),
            "excess_kurtosis": _fnum(rep.excess_kurtosis),
            "jb_stat": _fnum(rep.jb_stat), "jb_pvalue": _fnum(rep.jb_pvalue),
            "ks_stat": _fnum(rep.ks_stat), "ks_pvalue": _fnum(rep.ks_pvalue),
            "n": int(rep.n)}


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _mr_model_dict(result: mrcal.CalibrationResult) -> dict:
    p = result.params
    rate: dict = {"estimate": _fnum(p.a)}
    if p.a_stderr is None or not math.isfinite(p.a_stderr):
        rate["stderr"] = _null_with_reason("regression seed fallback; stderr unavailable")
    else:
        rate["stderr"] = _fnum(p.a_stderr)
    vol = {}
    for m in sorted(p.sigma):
        vol[_month_key(m)] = {**_interval_dict(p.sigma_ci[m], p.counts_month[m])}
    return {
        "model": "mean-reversion",
        "transform": p.transform,
        "vol_granularity": p.vol_granularity,
        "interpolation": "step",
        "rate": rate,
        "level": {_my_key(k): _fnum(v) for k, v in sorted(p.theta.items(),
                                                          key=lambda kv: (kv[0][1], kv[0][0]))},
        "volatility": vol,
        "residuals": _fit_report_dict(result.report),
        "loglik": _fnum(result.loglik),
        "diagnostics": sorted(p.diagnostics),
    }


def _bs_model_dict(params: mrcal.BSParams, report: stats.FitReport, alpha: float) -> dict:
    vol = {}
    for m in sorted(params.sigma):
        n = params.counts_month[m]
        if params.sigma[m] > 0 and n >= 2:
            vol[_month_key(m)] = _interval_dict(stats.vol_ci(params.sigma[m], n, alpha), n)
        else:
            vol[_month_key(m)] = {"estimate": _fnum(params.sigma[m]), "n": int(n)}
    return {
        "model": "black-scholes",
        "transform": params.transform,
        "interpolation": "step",
        "drift": {_my_key(k): _fnum(v) for k, v in sorted(params.mu.items(),
                                                          key=lambda kv: (kv[0][1], kv[0][0]))},
        "volatility": vol,
        "residuals": _fit_report_dict(report),
    }


def _sp_model_dict(cal: spotprompt.SPCalibration) -> dict:
    p = cal.params
    rate: dict = {"estimate": _fnum(p.a)}
    if p.a_stderr is None or not math.isfinite(p.a_stderr):
        rate["stderr"] = _null_with_reason("regression seed fallback; stderr unavailable")
    else:
        rate["stderr"] = _fnum(p.a_stderr)

    def vol_block(values: dict, cis: dict) -> dict:
        out = {}
        for m in sorted(values):
            if m in cis:
                out[_month_key(m)] = _interval_dict(cis[m], p.counts_month.get(m))
            else:
                out[_month_key(m)] = {"estimate": _fnum(values[m]),
                                      "n": int(p.counts_month.get(m, 0))}
        return out

    corr = {}
    for key in sorted(p.rho, key=str):
        entry: dict = {"estimate": _fnum(p.rho[key]), "n": int(p.counts_rho.get(key, 0))}
        if key in p.rho_ci:
            entry.update({"lower": _fnum(p.rho_ci[key].lower),
                          "upper": _fnum(p.rho_ci[key].upper)})
        corr[_bucket_key(key)] = entry
    return {
        "model": "spot-prompt",
        "vol_granularity": p.vol_granularity,
        "corr_granularity": p.corr_granularity,
        "interpolation": "step",
        "rate": rate,
        "quotient_level": {_my_key(k): _fnum(v) for k, v in
                           sorted(p.theta_tilde.items(), key=lambda kv: (kv[0][1], kv[0][0]))},
        "index_drift": {_my_key(k): _fnum(v) for k, v in
                        sorted(p.mu.items(), key=lambda kv: (kv[0][1], kv[0][0]))},
        "quotient_volatility": vol_block(p.sigma_q, p.sigma_q_ci),
        "index_volatility": vol_block(p.sigma_i, p.sigma_i_ci),
        "spot_volatility": vol_block(p.sigma_s, p.sigma_s_ci),
        "correlation": corr,
        "invalid_buckets": [{"bucket": _bucket_key(k), "reason": r}
                            for k, r in p.invalid_buckets],
        "spot_residuals": _fit_report_dict(cal.spot_report),
        "index_residuals": _fit_report_dict(cal.index_report),
        "diagnostics": sorted(p.diagnostics),
    }


# --- input parsing -------------------------------------------------------------

def _parse_input_spec(text: str) -> tuple[str, str, str]:
    """label=path[:column]; the column defaults to the label."""
    if "=" not in text:
        raise timeseries.DataError(f"input must look like label=path[:column]: {text!r}")
    label, rest = text.split("=", 1)
    if ":" in rest:
        path, column = rest.rsplit(":", 1)
    else:
        path, column = rest, label
    if not label or not path:
        raise timeseries.DataError(f"bad input spec {text!r}")
    return label, path, column


def _parse_sp_input_spec(text: str) -> tuple[str, tuple[str, str], tuple[str, str]]:
    """label=spotpath[:col],indexpath[:col]."""
    if "=" not in text:
        raise timeseries.DataError(
            f"sp input must look like label=spotpath[:col],indexpath[:col]: {text!r}")
    label, rest = text.split("=", 1)
    parts = rest.split(",")
    if len(parts) != 2:
        raise timeseries.DataError(f"sp input needs two files: {text!r}")

    def split_col(p: str, default: str) -> tuple[str, str]:
        if ":" in p:
            a, b = p.rsplit(":", 1)
            return a, b
        return p, default

    return label, split_col(parts[0], "spot"), split_col(parts[1], "index")


def _load_roll_dates(path) -> tuple[datetime, ...]:
    rolls = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            word = line.strip().split(",")[0].strip()
            if not word or word.lower() == "date":
                continue
            rolls.append(datetime.fromisoformat(word))
    if not rolls:
        raise timeseries.DataError(f"{path}: no roll dates found")
    return tuple(sorted(rolls))


def _parse_grid_spec(text: str) -> tuple[datetime, ...]:
    parts = text.split(":")
    if len(parts) != 3:
        raise timeseries.DataError(f"grid must look like start:end:freq, got {text!r}")
    start, end, freq = parts
    return simulate.make_grid(datetime.fromisoformat(start),
                              datetime.fromisoformat(end), freq)


def _load_curve(path, anchor: datetime) -> simulate.ForwardCurve:
    series_rows = []
    with open(path, "r", encoding="utf-8") as f:
        import csv as _csv
        reader = _csv.DictReader(f)
        if reader.fieldnames is None or "date" not in reader.fieldnames \
                or "price" not in reader.fieldnames:
            raise timeseries.DataError(f"{path}: curve needs 'date' and 'price' columns")
        for row in reader:
            if not (row.get("date") or "").strip():
                continue
            series_rows.append((datetime.fromisoformat(row["date"].strip()),
                                float(row["price"])))
    series_rows.sort(key=lambda tv: tv[0])
    if not series_rows:
        raise timeseries.DataError(f"{path}: empty curve")
    return simulate.ForwardCurve(anchor, tuple(t for t, _ in series_rows),
                                 np.array([v for _, v in series_rows]))


def _month_map(value, name: str) -> dict:
    """Accept a flat number or a {month: value} mapping from a sim spec."""
    if isinstance(value, (int, float)):
        return {m: float(value) for m in range(1, 13)}
    if isinstance(value, dict):
        return {int(k): float(v) for k, v in value.items()}
    raise timeseries.DataError(f"{name} must be a number or a month mapping")


def _my_map(value, name: str) -> dict:
    if not isinstance(value, dict):
        raise timeseries.DataError(f"{name} must map 'YYYY-MM' keys to numbers")
    return {_parse_my_key(k): float(v) for k, v in value.items()}


# --- command implementations ----------------------------------------------------

def _transform_of(model: str) -> str:
    if model == "lognormal":
        return "log"
    if model == "normal":
        return "identity"
    raise timeseries.DataError(f"model must be lognormal or normal, got {model!r}")


def _input_records(config: RunConfig) -> list[dict]:
    records = []
    for label, path, column in config.inputs:
        records.append({"label": label, "path": str(path), "column": column,
                        "sha256": _sha256_file(path)})
    for label, (sp, sc), (ip, ic) in config.sp_inputs:
        records.append({"label": label, "spot_path": str(sp), "spot_column": sc,
                        "index_path": str(ip), "index_column": ic,
                        "sha256_spot": _sha256_file(sp), "sha256_index": _sha256_file(ip)})
    return records


def _config_echo(config: RunConfig) -> dict:
    return {
        "command": config.command,
        "inputs": [list(i) for i in config.inputs],
        "sp_inputs": [[label, list(a), list(b)] for label, a, b in config.sp_inputs],
        "model": config.model,
        "vol_granularity": config.vol_granularity,
        "corr_granularity": config.corr_granularity,
        "alpha": config.alpha,
        "trim_pct": config.trim_pct,
        "unbiased": config.unbiased,
        "seed": config.seed,
        "n_paths": config.n_paths,
        "grid": config.grid,
        "roll_dates": config.roll_dates,
        "sim_spec": config.sim_spec,
        "curve": config.curve,
    }


def _run_calibrate_mr(config: RunConfig) -> dict:
    if not config.inputs:
        raise timeseries.DataError("calibrate-mr needs at least one --input")
    options = mrcal.CalibrateOptions(vol_granularity=config.vol_granularity,
                                     alpha=config.alpha, unbiased=config.unbiased)
    transform = _transform_of(config.model)
    models = {}
    for label, path, column in config.inputs:
        series = timeseries.load_csv(path, column, label=label)
        result = mrcal.calibrate(series, transform, options)
        models[label] = _mr_model_dict(result)
    return {"models": models}


def _run_calibrate_bs(config: RunConfig) -> dict:
    if not config.inputs:
        raise timeseries.DataError("calibrate-bs needs at least one --input")
    transform = _transform_of(config.model)
    models = {}
    for label, path, column in config.inputs:
        series = timeseries.load_csv(path, column, label=label)
        steps = timeseries.to_steps(series, transform)
        params = mrcal.bs_calibrate(steps, unbiased=config.unbiased)
        factors = mrcal.bs_residuals(steps, params)
        models[label] = _bs_model_dict(params, stats.fit_report(factors.values),
                                       config.alpha)
    return {"models": models}


def _run_calibrate_sp(config: RunConfig) -> dict:
    if not config.sp_inputs:
        raise timeseries.DataError("calibrate-sp needs at least one --sp-input")
    rolls = _load_roll_dates(config.roll_dates) if config.roll_dates else ()
    options = spotprompt.SPOptions(vol_granularity=config.vol_granularity,
                                   corr_granularity=config.corr_granularity,
                                   alpha=config.alpha, unbiased=config.unbiased,
                                   roll_dates=rolls)
    models = {}
    for label, (sp, sc), (ip, ic) in config.sp_inputs:
        spot = timeseries.load_csv(sp, sc, label=f"{label}")
        index = timeseries.load_csv(ip, ic, label=f"{label}Index")
        cal = spotprompt.calibrate_sp(spot, index, options)
        models[label] = _sp_model_dict(cal)
    return {"models": models}


def _run_calibrate_joint(config: RunConfig) -> dict:
    n_members = len(config.inputs) + len(config.sp_inputs)
    if n_members < 2:
        raise timeseries.DataError("calibrate-joint needs at least two members")
    transform = _transform_of(config.model)
    mr_options = mrcal.CalibrateOptions(vol_granularity=config.vol_granularity,
                                        alpha=config.alpha, unbiased=config.unbiased)
    sp_options = spotprompt.SPOptions(vol_granularity=config.vol_granularity,
                                      corr_granularity=config.corr_granularity,
                                      alpha=config.alpha, unbiased=config.unbiased)
    models = {}
    factors = []
    members = []
    for label, path, column in config.inputs:
        series = timeseries.load_csv(path, column, label=label)
        result = mrcal.calibrate(series, transform, mr_options)
        models[label] = _mr_model_dict(result)
        factor = timeseries.FactorSeries(result.factors.timestamps,
                                         result.factors.values, label=f"{label}:spot")
        factors.append(factor)
        members.append(joint.Member(label=f"{label}:spot", kind="MR", role="spot"))
    for label, (sp, sc), (ip, ic) in config.sp_inputs:
        spot = timeseries.load_csv(sp, sc, label=label)
        index = timeseries.load_csv(ip, ic, label=f"{label}Index")
        cal = spotprompt.calibrate_sp(spot, index, sp_options)
        models[label] = _sp_model_dict(cal)
        factors.append(cal.spot_factor)
        factors.append(timeseries.FactorSeries(cal.index_factor.timestamps,
                                               cal.index_factor.values,
                                               label=f"{label}:index"))
        members.append(joint.Member(label=f"{label}:spot", kind="SP", role="spot"))
        members.append(joint.Member(label=f"{label}:index", kind="SP", role="index"))
    granularity = config.corr_granularity
    model = joint.build_joint(factors, granularity=granularity, alpha=config.alpha,
                              trim_pct=config.trim_pct, members=members)
    corr = {}
    for (li, lj, bucket), entry in sorted(model.corr.items(), key=lambda kv: str(kv[0])):
        item: dict = {"estimate": _fnum(entry.rho), "n": int(entry.n)}
        if entry.interval is not None:
            item["lower"] = _fnum(entry.interval.lower)
            item["upper"] = _fnum(entry.interval.upper)
        corr[f"{li}|{lj}|{_bucket_key(bucket)}"] = item
    return {
        "models": models,
        "correlations": corr,
        "correlation_granularity": model.granularity,
        "trim_pct": model.trim_pct,
        "min_eigenvalue": {_bucket_key(k): _fnum(v)
                           for k, v in sorted(model.min_eigenvalue.items(), key=str)},
        "joint_diagnostics": sorted(model.diagnostics),
    }


def _run_simulate(config: RunConfig) -> dict:
    if not config.sim_spec:
        raise timeseries.DataError("simulate needs --sim-spec pointing at a JSON file")
    with open(config.sim_spec, "r", encoding="utf-8") as f:
        spec = json.load(f)
    seed = int(spec.get("seed", config.seed))
    n_paths = int(spec.get("paths", config.n_paths))
    if config.grid:
        grid = _parse_grid_spec(config.grid)
    elif "grid" in spec:
        g = spec["grid"]
        grid = simulate.make_grid(datetime.fromisoformat(g["start"]),
                                  datetime.fromisoformat(g["end"]),
                                  g.get("freq", "B"))
    else:
        raise timeseries.DataError("simulate needs a grid (flag or spec field)")
    model = spec.get("model", "mr-riskneutral")
    diagnostics: list[str] = []
    outputs: dict[str, np.ndarray] = {}
    if model == "mr-riskneutral":
        if not config.curve:
            raise timeseries.DataError("mr-riskneutral needs --curve")
        curve = _load_curve(config.curve, grid[0])
        sigma = _month_map(spec.get("sigma", 0.0), "sigma")
        paths = simulate.simulate_mr(curve, float(spec["a"]), sigma, grid, n_paths, seed)
        outputs["paths"] = paths
    elif model == "mr-realworld":
        sigma = _month_map(spec.get("sigma", 0.0), "sigma")
        theta = _my_map(spec["theta"], "theta")
        paths = simulate.simulate_mr_realworld(float(spec["a"]), theta, sigma, grid,
                                               float(spec.get("x0", 0.0)), n_paths, seed)
        outputs["paths"] = paths
    elif model == "sp-riskneutral":
        if not config.curve:
            raise timeseries.DataError("sp-riskneutral needs --curve")
        curve = _load_curve(config.curve, grid[0])
        if config.roll_dates:
            rolls = _load_roll_dates(config.roll_dates)
        else:
            rolls = default_rolls = simulate.default_roll_dates(grid[0], grid[-1])
            del default_rolls
            diagnostics.append("roll dates generated (end of month minus 3 weekdays)")
        rho = spec.get("rho", 0.0)
        rho = rho if isinstance(rho, (int, float)) else _month_map(rho, "rho")
        spot, index = simulate.simulate_sp(
            curve, float(spec["a"]), _month_map(spec["sigma_s"], "sigma_s"),
            _month_map(spec["sigma_i"], "sigma_i"), rho, rolls, grid, n_paths, seed,
            b=float(spec.get("b", 0.0)),
            s0=float(spec["s0"]) if "s0" in spec else None)
        outputs["paths"] = spot
        outputs["index_paths"] = index
    elif model == "sp-realworld":
        rho = spec.get("rho", 0.0)
        rho = rho if isinstance(rho, (int, float)) else _month_map(rho, "rho")
        spot, index = simulate.simulate_sp_realworld(
            float(spec["a"]), _my_map(spec["theta"], "theta"), _my_map(spec["mu"], "mu"),
            _month_map(spec["sigma_s"], "sigma_s"), _month_map(spec["sigma_i"], "sigma_i"),
            rho, grid, float(spec.get("x0", 0.0)), float(spec.get("y0", 0.0)),
            n_paths, seed)
        outputs["paths"] = spot
        outputs["index_paths"] = index
    elif model == "joint":
        members = []
        for m in spec["members"]:
            if m.get("kind", "mr") == "sp":
                members.append(simulate.SPMember(
                    label=m["label"], a=float(m["a"]),
                    theta_q=_my_map(m["theta_q"], "theta_q"), mu=_my_map(m["mu"], "mu"),
                    sigma_s=_month_map(m["sigma_s"], "sigma_s"),
                    sigma_i=_month_map(m["sigma_i"], "sigma_i"),
                    x0=float(m.get("x0", 0.0)), y0=float(m.get("y0", 0.0))))
            else:
                members.append(simulate.MRMember(
                    label=m["label"], a=float(m["a"]), theta=_my_map(m["theta"], "theta"),
                    sigma=_month_map(m["sigma"], "sigma"), x0=float(m.get("x0", 0.0)),
                    transform=m.get("transform", "log")))
        corr_spec = spec.get("correlation")
        corr = None
        if corr_spec is not None:
            corr = {}
            for key, matrix in corr_spec.items():
                bucket: object = int(key) if key.isdigit() else key
                corr[bucket] = np.asarray(matrix, dtype=float)
        paths, repairs = simulate.simulate_joint(members, corr, grid, n_paths, seed,
                                                 granularity=spec.get("granularity", "flat"))
        outputs.update(paths)
        for key, rep in sorted(repairs.items(), key=str):
            if rep["repaired"]:
                diagnostics.append(
                    f"bucket {key}: correlation matrix repaired "
                    f"(smallest eigenvalue {rep['min_eigenvalue']:.3e})")
    else:
        raise timeseries.DataError(f"unknown simulation model {model!r}")

    spec_bytes = json.dumps(spec, sort_keys=True).encode()
    digest = simulate.spec_digest(spec_bytes)
    artifacts = {}
    if config.out_paths:
        base = Path(config.out_paths)
        for name, paths in sorted(outputs.items()):
            target = base if len(outputs) == 1 else base.with_name(
                base.stem + f".{name}" + base.suffix)
            if config.paths_format == "csv":
                simulate.write_paths_csv(target, grid, paths)
            elif config.paths_format == "bin":
                simulate.write_paths_bin(target, grid, paths, seed, digest)
            else:
                raise timeseries.DataError(f"unknown paths format {config.paths_format!r}")
            artifacts[name] = str(target)
    summary = {}
    for name, paths in sorted(outputs.items()):
        summary[name] = {
            "n_paths": int(paths.shape[0]),
            "n_times": int(paths.shape[1]),
            "terminal_mean": _fnum(paths[:, -1].mean()),
        }
    return {
        "simulation": {
            "model": model,
            "seed": seed,
            "n_paths": n_paths,
            "grid_start": grid[0].isoformat(),
            "grid_end": grid[-1].isoformat(),
            "grid_points": len(grid),
            "spec_sha256": digest.hex(),
            "outputs": summary,
            "artifacts": artifacts,
            "diagnostics": diagnostics,
        }
    }


def _selftest_checks() -> list[tuple[str, bool]]:
    from datetime import timedelta

    checks: list[tuple[str, bool]] = []

    def check(name: str, fn):
        try:
            checks.append((name, bool(fn())))
        except Exception:
            checks.append((name, False))

    check("coefs zero-rate limit",
          lambda: mrcal.coefs(0.0, 0.01) == mrcal.Coefs(1.0, 0.01, 0.1))
    check("coefs continuity at series switch",
          lambda: abs(mrcal.coefs(1e-8 / 0.01 * 0.999, 0.01).kappa
                      - mrcal.coefs(1e-8 / 0.01 * 1.001, 0.01).kappa) < 1e-12)
    check("Q_KS near zero equals one", lambda: abs(stats.qks(0.05) - 1.0) < 1e-9)
    check("Q_KS decreasing", lambda: stats.qks(0.5) > stats.qks(1.0) > stats.qks(2.0))
    check("volatility interval brackets estimate",
          lambda: stats.vol_ci(1.0, 30).lower < 1.0 < stats.vol_ci(1.0, 30).upper)
    check("correlation interval inside (-1,1)",
          lambda: -1 < stats.corr_ci(0.9, 20).lower < stats.corr_ci(0.9, 20).upper < 1)
    check("nu-xi correlation paper constants",
          lambda: round(spotprompt.rho_nu_xi(1.0, 0.5), 2) == 0.99
          and round(spotprompt.rho_nu_xi(1.0, 1.0), 2) == 0.96)

    def _vsq():
        t0 = datetime(2009, 1, 1)
        t1 = datetime(2009, 1, 31)
        v = simulate.v_squared(2.0, {1: 0.5}, t0, t1)
        tau = timeseries.year_fraction(t0, t1)
        expected = 0.25 / 4.0 * (1.0 - math.exp(-4.0 * tau))
        return abs(v - expected) < 1e-14

    check("v_squared single-month closed form", _vsq)

    def _theta_fixed_point():
        ts = tuple(datetime(2009, 1, 1) + timedelta(days=k) for k in range(10))
        series = timeseries.PriceSeries(ts, np.full(10, math.e), label="const")
        steps = timeseries.to_steps(series, "log")
        theta = mrcal.theta_hat(steps, 12.0)
        return all(abs(v - 12.0) < 1e-9 for v in theta.values())

    check("level estimator fixed point on constant data", _theta_fixed_point)

    def _bs_limit():
        rng = np.random.default_rng(7)
        ts = tuple(datetime(2009, 1, 1) + timedelta(days=k) for k in range(120))
        series = timeseries.PriceSeries(ts, np.exp(rng.normal(0, 0.1, 120).cumsum() + 1.0))
        steps = timeseries.to_steps(series, "log")
        bs = mrcal.bs_calibrate(steps)
        theta = mrcal.theta_hat(steps, 1e-9)
        return all(abs(theta[k] - bs.mu[k]) <= 1e-6 * max(1.0, abs(bs.mu[k]))
                   for k in bs.mu)

    check("zero-rate limit matches Black-Scholes", _bs_limit)

    def _sim_determinism():
        grid = tuple(datetime(2009, 1, 1) + timedelta(days=k) for k in range(5))
        theta = {(1, 2009): 20.0}
        p1 = simulate.simulate_mr_realworld(10.0, theta, {1: 0.5}, grid, 2.0, 16, 42)
        p2 = simulate.simulate_mr_realworld(10.0, theta, {1: 0.5}, grid, 2.0, 16, 42)
        p3 = simulate.simulate_mr_realworld(10.0, theta, {1: 0.5}, grid, 2.0, 64, 42)
        return np.array_equal(p1, p2) and np.array_equal(p1, p3[:16])

    check("simulation deterministic and path-count stable", _sim_determinism)

    def _trim_rule():
        ts = tuple(datetime(2009, 1, 1) + timedelta(days=k) for k in range(100))
        f = timeseries.FactorSeries(ts, np.linspace(-3, 3, 100), label="f")
        trimmed, removed = joint.trim_outliers(f, 0.02)
        return len(trimmed) == 96 and len(removed) == 4

    check("trim count rule", _trim_rule)

    def _residual_roundtrip():
        grid = tuple(datetime(2009, 1, 1) + timedelta(days=k) for k in range(40))
        theta = {(1, 2009): 16.0, (2, 2009): 16.0}
        sigma = {1: 0.8, 2: 0.8}
        x, draws = simulate.simulate_mr_realworld(8.0, theta, sigma, grid, 2.0, 1, 5,
                                                  return_draws=True)
        ts = grid
        series = timeseries.PriceSeries(ts, np.exp(x[0]))
        steps = timeseries.to_steps(series, "log")
        params = mrcal.MRParams(a=8.0, a_stderr=None, theta=theta, sigma=sigma,
                                sigma_ci={}, counts_month={}, counts_my={},
                                transform="log")
        eps = mrcal.residuals(steps, params)
        return float(np.max(np.abs(eps.values - draws[0]))) < 1e-10

    check("residual inversion round trip", _residual_roundtrip)
    return checks


def _run_selftest(config: RunConfig) -> dict:
    del config
    checks = _selftest_checks()
    return {
        "selftest": {
            "passed": sum(1 for _, ok in checks if ok),
            "failed": sum(1 for _, ok in checks if not ok),
            "checks": [{"name": name, "ok": ok} for name, ok in checks],
        }
    }


# --- report rendering -----------------------------------------------------------

def render_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _render_text_lines(obj, indent: int, lines: list[str]) -> None:
    pad = "  " * indent
    if isinstance(obj, dict):
        for key in sorted(obj, key=str):
            value = obj[key]
            if isinstance(value, (dict, list)):
                lines.append(f"{pad}{key}:")
                _render_text_lines(value, indent + 1, lines)
            else:
                lines.append(f"{pad}{key}: {_text_scalar(value)}")
    elif isinstance(obj, list):
        for value in obj:
            if isinstance(value, (dict, list)):
                lines.append(f"{pad}-")
                _render_text_lines(value, indent + 1, lines)
            else:
                lines.append(f"{pad}- {_text_scalar(value)}")
    else:
        lines.append(f"{pad}{_text_scalar(obj)}")


def _text_scalar(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def render_text(report: dict) -> str:
    lines: list[str] = []
    _render_text_lines(report, 0, lines)
    return "\n".join(lines) + "\n"


# --- entry points ----------------------------------------------------------------

def run(config: RunConfig) -> tuple[int, dict]:
    """Execute one command; returns (exit status, report dict)."""
    config.validate()
    base = {"version": __version__, "config": _config_echo(config),
            "inputs": _input_records(config)}
    try:
        if config.command == "calibrate-mr":
            body = _run_calibrate_mr(config)
        elif config.command == "calibrate-bs":
            body = _run_calibrate_bs(config)
        elif config.command == "calibrate-sp":
            body = _run_calibrate_sp(config)
        elif config.command == "calibrate-joint":
            body = _run_calibrate_joint(config)
        elif config.command == "simulate":
            body = _run_simulate(config)
        else:
            body = _run_selftest(config)
    except (timeseries.DataError, mrcal.CalibrationError, KeyError, ValueError) as exc:
        report = {**base, "error": {"type": type(exc).__name__, "message": str(exc)}}
        return 2, report
    report = {**base, **body}
    if config.command == "selftest" and body["selftest"]["failed"]:
        return 1, report
    return 0, report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enercal",
        description="Calibrate mean-reverting energy price models and simulate them.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--out", help="write the report here instead of stdout")
        p.add_argument("--format", dest="report_format", choices=("json", "text"),
                       default="json")

    for name in ("calibrate-mr", "calibrate-bs"):
        p = sub.add_parser(name)
        add_common(p)
        p.add_argument("--input", action="append", default=[],
                       metavar="label=path[:column]")
        p.add_argument("--model", choices=("lognormal", "normal"), default="lognormal")
        p.add_argument("--vol-granularity", choices=timeseries.GRANULARITIES,
                       default="monthly")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--biased-vol", action="store_true",
                       help="use the plain MLE (1/N) variance estimator")

    p = sub.add_parser("calibrate-sp")
    add_common(p)
    p.add_argument("--sp-input", action="append", default=[],
                   metavar="label=spotpath[:col],indexpath[:col]")
    p.add_argument("--vol-granularity", choices=timeseries.GRANULARITIES, default="monthly")
    p.add_argument("--corr-granularity", choices=("monthly", "flat"), default="flat")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--biased-vol", action="store_true")
    p.add_argument("--roll-dates", help="file of roll dates; straddling pairs are dropped")

    p = sub.add_parser("calibrate-joint")
    add_common(p)
    p.add_argument("--input", action="append", default=[], metavar="label=path[:column]")
    p.add_argument("--sp-input", action="append", default=[],
                   metavar="label=spotpath[:col],indexpath[:col]")
    p.add_argument("--model", choices=("lognormal", "normal"), default="lognormal")
    p.add_argument("--vol-granularity", choices=timeseries.GRANULARITIES, default="monthly")
    p.add_argument("--corr-granularity", choices=("monthly", "flat"), default="flat")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--trim", dest="trim_pct", type=float, default=0.0)
    p.add_argument("--biased-vol", action="store_true")

    p = sub.add_parser("simulate")
    add_common(p)
    p.add_argument("--sim-spec", help="JSON simulation spec file")
    p.add_argument("--curve", help="forward curve CSV (date,price)")
    p.add_argument("--grid", help="start:end:freq with freq in D,B,W,H")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--paths", dest="n_paths", type=int, default=1000)
    p.add_argument("--roll-dates")
    p.add_argument("--out-paths", help="write simulated paths here")
    p.add_argument("--paths-format", choices=("csv", "bin"), default="csv")

    p = sub.add_parser("selftest")
    add_common(p)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            values.update(json.load(f))
    config = RunConfig(command=args.command)
    for fld in ("model", "vol_granularity", "corr_granularity", "alpha", "trim_pct",
                "seed", "n_paths", "grid", "roll_dates", "sim_spec", "curve", "out",
                "out_paths", "paths_format", "report_format"):
        if fld in values:
            setattr(config, fld, values[fld])
        if hasattr(args, fld) and getattr(args, fld) is not None:
            default = RunConfig(command=args.command)
            if getattr(args, fld) != getattr(default, fld) or fld not in values:
                setattr(config, fld, getattr(args, fld))
    if values.get("inputs"):
        config.inputs = [tuple(i) for i in values["inputs"]]
    if values.get("sp_inputs"):
        config.sp_inputs = [(label, tuple(a), tuple(b))
                            for label, a, b in values["sp_inputs"]]
    for spec in getattr(args, "input", []) or []:
        config.inputs.append(_parse_input_spec(spec))
    for spec in getattr(args, "sp_input", []) or []:
        config.sp_inputs.append(_parse_sp_input_spec(spec))
    if getattr(args, "biased_vol", False):
        config.unbiased = False
    elif "unbiased" in values:
        config.unbiased = bool(values["unbiased"])
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ENERCAL_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
    except (timeseries.DataError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(render_json({"error": {"type": type(exc).__name__,
                                                "message": str(exc)}}))
        return 2
    status, report = run(config)
    rendered = render_text(report) if config.report_format == "text" else render_json(report)
    if config.out:
        with open(config.out, "w", encoding="utf-8") as f:
            f.write(rendered)
    else:
        sys.stdout.write(rendered)
    return status


if __name__ == "__main__":
    sys.exit(main())
