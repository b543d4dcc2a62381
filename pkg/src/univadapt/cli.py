"""Experiment runner: presets, config validation, Monte Carlo batches, validation and metric fitting.

Usage::

    univadapt run ex1 [--config F] [--seed S] [--trials N] [--out DIR] [--workers W] [--no-adaptation]
    univadapt run ex2 [--config F] [--out DIR] [--static-reference]
    univadapt validate ex1|ex2 [--config F] [--out DIR]
    univadapt fit-metric [--config F] [--out DIR]

Exit codes: 0 success, 1 usage or config error, 2 validation failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .control import backstepping_control, min_norm_clf
from .errors import ConfigurationError, SynthesisError, UnivAdaptError
from .geom.certify import validate_uccm, validate_uclf
from .geom.fit import FitSettings, fit_metric_coeffs, refine_metric_fit
from .geom.metric import PolynomialMetric
from .lyap import AdaptGains, AdaptState, ScalingFunction, backstepping_uclf
from .sim import ReferenceModel, SimConfig, TrajectoryLog, simulate_uccm, simulate_uclf_batch
from .sysmodel import ParameterBox, get_model

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3
CHUNK = 25  # trials per batch task; fixed so results do not depend on the worker count
BUILTIN_METRIC = "builtin:ex2"

_box = {"type": "object", "additionalProperties": False, "required": ["lower", "upper"],
        "properties": {"lower": {"type": "array", "items": {"type": "number"}},
                       "upper": {"type": "array", "items": {"type": "number"}}}}
_vec = {"type": "array", "items": {"type": "number"}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["ex1", "ex2"]},
        "model": {"type": "string"},
        "controller": {"enum": ["backstepping", "min-norm-clf", "min-norm-ccm"]},
        "uclf": {"type": "object", "additionalProperties": False,
                 "properties": {"kind": {"enum": ["backstepping"]}, "variant": {"enum": ["derived", "printed"]}}},
        "metric": {"type": "object", "additionalProperties": False,
                   "properties": {"path": {"type": "string"}, "lambda": {"type": "number", "exclusiveMinimum": 0},
                                  "bounds": _vec, "validate": {"type": "boolean"}}},
        "gains": {"type": "object", "additionalProperties": False, "required": ["gamma_diag", "eta"],
                  "properties": {"gamma_diag": _vec, "eta": {"type": "number", "exclusiveMinimum": 0}}},
        "scaling": {"type": "object", "additionalProperties": False,
                    "properties": {"a": {"type": "number"}, "b": {"type": "number"}, "c": {"type": "number"},
                                   "rho_max": {"type": "number"}}},
        "sim": {"type": "object", "additionalProperties": False,
                "properties": {"dt": {"type": "number"}, "t_final": {"type": "number"},
                               "integrator": {"enum": ["rk4", "euler"]}, "projection": {"type": "boolean"},
                               "log_stride": {"type": "integer", "minimum": 1},
                               "divergence_threshold": {"type": "number"},
                               "geodesic_policy": {"enum": ["reuse", "abort"]},
                               "geodesic_segments": {"type": "integer", "minimum": 2}}},
        "x0_box": _box,
        "theta_box": _box,
        "x0": _vec,
        "theta_true": _vec,
        "theta_hat0": _vec,
        "x2d0": {"type": "number"},
        "arms": {"type": "array", "items": {"enum": ["adaptive", "no_adaptation", "static"]}, "minItems": 1},
        "trials": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "converge_threshold": {"type": "number", "exclusiveMinimum": 0},
        "average_window": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "csv_stride": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "validation": {"type": "object", "additionalProperties": False,
                       "properties": {"x_lower": _vec, "x_upper": _vec,
                                      "x_points": {"type": "integer", "minimum": 0},
                                      "theta_points": {"type": "integer", "minimum": 1},
                                      "u_samples": {"type": "array", "items": _vec}}},
        "fit": {"type": "object", "additionalProperties": False,
                "properties": {"degree": {"type": "integer", "minimum": 0},
                               "state_vars": {"type": "array", "items": {"type": "integer"}},
                               "theta_degree": {"type": "integer", "minimum": 0},
                               "x_lower": _vec, "x_upper": _vec, "x_points": {"type": "integer", "minimum": 1},
                               "theta_points": {"type": "integer", "minimum": 1},
                               "margin": {"type": "number"}, "max_iters": {"type": "integer", "minimum": 0},
                               "max_samples": {"type": "integer", "minimum": 1},
                               "learning_rate": {"type": "number"}, "seed": {"type": "integer"},
                               "validate_points": {"type": "integer", "minimum": 0},
                               "check_points": {"type": "integer", "minimum": 0},
                               "refine_rounds": {"type": "integer", "minimum": 0},
                               "refine_iters": {"type": "integer", "minimum": 0}}},
    },
}

PRESETS = {
    "ex1": {
        "model": "ex1-strict-feedback",
        "controller": "backstepping",
        "uclf": {"kind": "backstepping", "variant": "derived"},
        "gains": {"gamma_diag": [0.1, 0.1], "eta": 100.0},
        "scaling": {"a": 0.9, "b": 0.1, "c": 5.0, "rho_max": 500.0},
        "sim": {"dt": 0.005, "t_final": 20.0, "integrator": "rk4", "projection": False, "log_stride": 1},
        "x0_box": {"lower": [-2.0, -2.0, -2.0], "upper": [2.0, 2.0, 2.0]},
        "theta_box": {"lower": [-0.2, 0.2], "upper": [0.4, 0.6]},
        "arms": ["adaptive", "no_adaptation"],
        "trials": 100,
        "seed": 0,
        "converge_threshold": 0.05,
        "csv_stride": 10,
        "output_dir": "runs/ex1",
        "validation": {"x_lower": [-2.0, -2.0, -2.0], "x_upper": [2.0, 2.0, 2.0], "x_points": 21,
                       "theta_points": 5},
    },
    "ex2": {
        "model": "ex2-contracting",
        "controller": "min-norm-ccm",
        "metric": {"path": BUILTIN_METRIC, "lambda": 0.5, "validate": True},
        "gains": {"gamma_diag": [5.0, 5.0, 5.0, 5.0], "eta": 0.1},
        "scaling": {"a": 0.9, "b": 0.1, "c": 5.0, "rho_max": 500.0},
        "sim": {"dt": 0.01, "t_final": 30.0, "integrator": "rk4", "projection": True, "log_stride": 1},
        "theta_box": {"lower": [-0.4, -1.0, -0.6, -1.75], "upper": [0.5, 0.6, 0.75, 0.4]},
        "theta_true": [-0.3, -0.8, -0.25, -0.75],
        "x0": [0.5, 0.5, 0.0],
        "x2d0": 0.0,
        "arms": ["adaptive", "static"],
        "trials": 1,
        "seed": 0,
        "converge_threshold": 0.05,
        "average_window": [5.0, 30.0],
        "csv_stride": 1,
        "output_dir": "runs/ex2",
        "validation": {"x_lower": [-2.0, -2.0, -4.0], "x_upper": [2.0, 2.0, 4.0], "x_points": 11,
                       "theta_points": 3},
        "fit": {"degree": 2, "state_vars": [0, 1], "theta_degree": 1, "x_lower": [-2.0, -2.0, -4.0],
                "x_upper": [2.0, 2.0, 4.0], "x_points": 9, "theta_points": 3, "margin": 0.05,
                "max_iters": 8000, "max_samples": 5000, "learning_rate": 0.05, "seed": 0,
                "validate_points": 21, "check_points": 17, "refine_rounds": 8, "refine_iters": 3000},
    },
}


# ---------------------------------------------------------------------------
# configuration

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Read a JSON config (if any), lay it over its preset, apply overrides and validate."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must hold a JSON object")
    name = raw.get("preset", preset)
    if preset is not None and name != preset:
        raise ConfigurationError(f"config preset {name!r} does not match command {preset!r}")
    cfg = _merge(PRESETS[name], raw) if name in PRESETS else dict(raw)
    if name is not None:
        cfg["preset"] = name
    cfg = _merge(cfg, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {exc.message}") from None
    mpath = cfg.get("metric", {}).get("path")
    if mpath and mpath != BUILTIN_METRIC and not Path(mpath).is_file():
        raise ConfigurationError(f"metric file {mpath} does not exist")
    return cfg


def _box(spec) -> ParameterBox:
    return ParameterBox(np.asarray(spec["lower"], float), np.asarray(spec["upper"], float))


def _scaling(cfg) -> ScalingFunction:
    return ScalingFunction(**cfg.get("scaling", {}))


def _gains(cfg) -> AdaptGains:
    g = cfg["gains"]
    return AdaptGains(np.diag(np.asarray(g["gamma_diag"], float)), float(g["eta"]))


def _sim_config(cfg, **extra) -> SimConfig:
    return SimConfig(**{**cfg.get("sim", {}), **extra})


def _check_dims(cfg, model):
    g = cfg["gains"]["gamma_diag"]
    if len(g) != model.p:
        raise ConfigurationError(f"gamma_diag has {len(g)} entries, model has p={model.p}")
    for key, size in (("theta_box", model.p), ("x0_box", model.n)):
        if key in cfg and not (len(cfg[key]["lower"]) == len(cfg[key]["upper"]) == size):
            raise ConfigurationError(f"{key} must have {size} entries per bound")
    for key, size in (("x0", model.n), ("theta_true", model.p), ("theta_hat0", model.p)):
        if key in cfg and len(cfg[key]) != size:
            raise ConfigurationError(f"{key} must have {size} entries")


def load_metric(cfg):
    spec = cfg.get("metric", {})
    path = spec.get("path", BUILTIN_METRIC)
    if path == BUILTIN_METRIC:
        text = resources.files("univadapt").joinpath("data/ex2_metric.json").read_text()
        poly = PolynomialMetric.from_dict(json.loads(text))
    else:
        poly = PolynomialMetric.load(path)
    lam = float(spec.get("lambda", poly.meta.get("lambda", 0.5)))
    bounds = tuple(spec.get("bounds", poly.meta.get("metric_bounds", (0.0, np.inf))))
    return poly, poly.to_family(lam, bounds, name=Path(str(path)).stem)


def _controller(cfg):
    variant = cfg.get("uclf", {}).get("variant", "derived")
    kind = cfg.get("controller", "backstepping")
    if kind == "backstepping":
        return lambda x, th, t: backstepping_control(x, th, variant)[..., None]
    if kind == "min-norm-clf":
        model = get_model(cfg["model"])
        uclf = backstepping_uclf(variant)
        return lambda x, th, t: min_norm_clf(model, uclf, x, th, t).u
    raise ConfigurationError(f"controller {kind!r} does not close a Lyapunov loop")


# ---------------------------------------------------------------------------
# summaries and output

@dataclass
class BatchSummary:
    arm: str
    trials: int
    converged: int
    diverged: int           # every trial that did not converge
    blowups: int            # trials stopped by the divergence threshold
    final_values: list = field(default_factory=list)
    upsilon_range: list = field(default_factory=list)
    percentiles: dict = field(default_factory=dict)
    time_avg_energy: Optional[float] = None
    tail_tracking_error: Optional[float] = None   # max |x1 - x1d| over the last 10 s (Ex. 2)
    wall_time: float = 0.0

    def __post_init__(self):
        if self.converged + self.diverged != self.trials:
            raise ConfigurationError("summary counts do not add up")

    def to_dict(self):
        return asdict(self)


def summarize(arm: str, logs, threshold: float, window=None, by: str = "error") -> BatchSummary:
    """``by="error"`` gates on final ||x - x_d|| (Ex. 1); ``"certificate"`` on the final energy (Ex. 2)."""
    finals = [lg.final_error() if by == "error" else lg.final_certificate() for lg in logs]
    conv = sum(lg.converged(threshold, by) for lg in logs)
    vals = np.array([f for f in finals if np.isfinite(f)]) if finals else np.array([])
    pct = {f"p{q}": float(np.percentile(vals, q)) for q in (5, 50, 95)} if vals.size else {}
    avg = None
    if window is not None and logs:
        w = (logs[0].times >= window[0]) & (logs[0].times <= window[1])
        avg = float(np.mean(logs[0].certificate[w])) if np.any(w) else None
    return BatchSummary(arm=arm, trials=len(logs), converged=int(conv), diverged=len(logs) - int(conv),
                        blowups=int(sum(lg.diverged for lg in logs)), final_values=[float(f) for f in finals],
                        upsilon_range=[[float(lg.upsilon.min()), float(lg.upsilon.max())] for lg in logs],
                        percentiles=pct, time_avg_energy=avg,
                        wall_time=float(sum(lg.wall_time for lg in logs[:1])))


def _stride(lg: TrajectoryLog, k: int) -> TrajectoryLog:
    if k == 1:
        return lg
    sel = slice(None, None, k)
    kw = {name: getattr(lg, name)[sel] for name in ("times", "x", "theta_hat", "rho", "upsilon", "u", "certificate",
                                                     "composite", "x_d", "u_d", "geodesic_residual",
                                                     "constraint_active")}
    return TrajectoryLog(**kw, diverged=lg.diverged, failure=lg.failure, wall_time=lg.wall_time, events=lg.events)


def _write_series(path: Path, times, columns: dict):
    """CSV with a time column and one column per named series (NaN-padded when a trial stopped early)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + list(columns))
    cols = list(columns.values())
    for i, t in enumerate(times):
        w.writerow([repr(float(t))] + [repr(float(c[i])) if i < len(c) else "nan" for c in cols])
    path.write_text(buf.getvalue())


def _prepare_out(out: Path, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# experiment 1: Monte Carlo regulation

def draw_ex1(cfg) -> tuple:
    """Per-trial ``(x0, theta_true)`` from split random streams of one seed.

    An explicit ``x0`` or ``theta_true`` in the config pins that quantity for every trial.
    """
    xbox, tbox = _box(cfg["x0_box"]), _box(cfg["theta_box"])
    root = np.random.SeedSequence(int(cfg["seed"]))
    x0s, ths = [], []
    for child in root.spawn(int(cfg["trials"])):
        rng = np.random.default_rng(child)
        x0s.append(xbox.sample(rng))
        ths.append(tbox.sample(rng))
    x0s, ths = np.array(x0s), np.array(ths)
    if "x0" in cfg:
        x0s[:] = np.asarray(cfg["x0"], float)
    if "theta_true" in cfg:
        ths[:] = np.asarray(cfg["theta_true"], float)
    return x0s, ths


def _ex1_chunk(cfg: dict, arm: str, x0, theta_true):
    model = get_model(cfg["model"])
    uclf = backstepping_uclf(cfg.get("uclf", {}).get("variant", "derived"))
    tbox = _box(cfg["theta_box"])
    th0 = np.asarray(cfg.get("theta_hat0", tbox.center), float)
    sim = _sim_config(cfg, adapt=(arm == "adaptive"))
    return simulate_uclf_batch(model, uclf, _scaling(cfg), _gains(cfg), _controller(cfg), x0, theta_true,
                               AdaptState(th0), sim, tbox if sim.projection else None)


def _run_chunks(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def run_monte_carlo_ex1(cfg: dict, workers: int = 1, out: Optional[Path] = None) -> dict:
    """Run every configured arm on the same draws; returns ``{arm: (BatchSummary, logs)}``."""
    model = get_model(cfg["model"])
    _check_dims(cfg, model)
    x0s, ths = draw_ex1(cfg)
    arms = cfg.get("arms", ["adaptive"])
    jobs = [(cfg, arm, x0s[i:i + CHUNK], ths[i:i + CHUNK]) for arm in arms for i in range(0, len(x0s), CHUNK)]
    start = time.perf_counter()
    chunks = _run_chunks(_ex1_chunk, jobs, workers)
    results, k = {}, 0
    for arm in arms:
        logs = []
        for _ in range(0, len(x0s), CHUNK):
            logs.extend(chunks[k])
            k += 1
        summary = summarize(arm, logs, float(cfg["converge_threshold"]))
        summary.wall_time = time.perf_counter() - start
        results[arm] = (summary, logs)
    if out is not None:
        _write_ex1(out, cfg, results, x0s, ths)
    return results


def _write_ex1(out: Path, cfg, results, x0s, ths):
    _prepare_out(out, cfg)
    stride = int(cfg.get("csv_stride", 1))
    summary = {"experiment": "ex1", "seed": cfg["seed"], "trials": cfg["trials"],
               "draws": {"x0": x0s.tolist(), "theta_true": ths.tolist()}, "arms": {}}
    for arm, (summ, logs) in results.items():
        d = out / arm
        d.mkdir(exist_ok=True)
        for i, lg in enumerate(logs):
            _stride(lg, stride).to_csv(d / f"trial_{i:03d}.csv")
        longest = max(logs, key=len)
        times = longest.times[::stride]
        _write_series(out / f"plot_state_norm_{arm}.csv", times,
                      {f"trial_{i:03d}": np.linalg.norm(lg.x, axis=1)[::stride] for i, lg in enumerate(logs)})
        _write_series(out / f"plot_upsilon_{arm}.csv", times,
                      {f"trial_{i:03d}": lg.upsilon[::stride] for i, lg in enumerate(logs)})
        summary["arms"][arm] = summ.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------------------
# experiment 2: tracking with and without an adapting reference

def _ex2_arm(cfg: dict, arm: str):
    model = get_model(cfg["model"])
    _, metric = load_metric(cfg)
    tbox = _box(cfg["theta_box"])
    th0 = np.asarray(cfg.get("theta_hat0", tbox.center), float)
    sim = _sim_config(cfg)
    ref = ReferenceModel("static" if arm == "static" else "adaptive", float(cfg.get("x2d0", 0.0)))
    return simulate_uccm(model, metric, _scaling(cfg), _gains(cfg), ref, np.asarray(cfg["x0"], float),
                         np.asarray(cfg["theta_true"], float), AdaptState(th0), sim,
                         tbox if sim.projection else None)


def check_metric(cfg):
    """Validate the configured metric on the configured grid; returns the report."""
    model = get_model(cfg["model"])
    _, metric = load_metric(cfg)
    v = cfg["validation"]
    return validate_uccm(metric, model, _state_grid(v, model.n), _box(cfg["theta_box"]).grid(v["theta_points"]),
                         np.asarray(v["u_samples"], float) if "u_samples" in v else None)


def run_tracking_ex2(cfg: dict, workers: int = 1, out: Optional[Path] = None) -> dict:
    """Run the configured reference arms from identical initial conditions."""
    model = get_model(cfg["model"])
    _check_dims(cfg, model)
    if cfg.get("metric", {}).get("validate", True):
        report = check_metric(cfg)
        if not report.passed:
            raise ValidationFailure("metric failed validation", report.to_dict())
    arms = cfg.get("arms", ["adaptive", "static"])
    logs = _run_chunks(_ex2_arm, [(cfg, arm) for arm in arms], workers)
    window = cfg.get("average_window")
    results = {}
    for arm, lg in zip(arms, logs):
        s = summarize(arm, [lg], float(cfg["converge_threshold"]), window, by="certificate")
        s.wall_time = lg.wall_time
        tail = lg.times >= lg.times[-1] - 10.0
        s.tail_tracking_error = float(np.max(np.abs(lg.x[tail, 0] - lg.x_d[tail, 0])))
        results[arm] = (s, [lg])
    if out is not None:
        _write_ex2(out, cfg, results)
    return results


def _write_ex2(out: Path, cfg, results):
    _prepare_out(out, cfg)
    stride = int(cfg.get("csv_stride", 1))
    summary = {"experiment": "ex2", "arms": {}}
    energy, states = {}, {}
    times = None
    for arm, (summ, (lg,)) in results.items():
        d = out / arm
        d.mkdir(exist_ok=True)
        _stride(lg, stride).to_csv(d / "trajectory.csv")
        times = lg.times[::stride] if times is None or len(lg) > len(times) * stride else times
        energy[arm] = lg.certificate[::stride]
        for i in range(lg.x.shape[1]):
            states[f"{arm}_x{i + 1}"] = lg.x[::stride, i]
            states[f"{arm}_x{i + 1}d"] = lg.x_d[::stride, i]
        summary["arms"][arm] = summ.to_dict()
    _write_series(out / "plot_energy.csv", times, energy)
    _write_series(out / "plot_states.csv", times, states)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


# ---------------------------------------------------------------------------
# validation and fitting

class ValidationFailure(UnivAdaptError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _state_grid(spec: dict, n: int) -> np.ndarray:
    k = int(spec.get("x_points", 0))
    if k == 0:
        return np.zeros((0, n))
    lo, hi = np.asarray(spec["x_lower"], float), np.asarray(spec["x_upper"], float)
    if lo.shape != (n,) or hi.shape != (n,):
        raise ConfigurationError(f"grid bounds must have {n} entries")
    return _box({"lower": lo, "upper": hi}).grid(k)


def validate_certificate(cfg: dict):
    """uclf feasibility (Lyapunov presets) or C1/C2 (metric presets) over the configured grid."""
    model = get_model(cfg["model"])
    v = cfg.get("validation")
    if v is None:
        raise ConfigurationError("config has no 'validation' section")
    xs = _state_grid(v, model.n)
    ths = _box(cfg["theta_box"]).grid(int(v.get("theta_points", 3)))
    if "metric" in cfg:
        _, metric = load_metric(cfg)
        us = np.asarray(v["u_samples"], float) if "u_samples" in v else None
        return validate_uccm(metric, model, xs, ths, us)
    uclf = backstepping_uclf(cfg.get("uclf", {}).get("variant", "derived"))
    return validate_uclf(model, uclf, xs, ths)


def fit_metric(cfg: dict):
    """Fit the configured polynomial template; returns ``(PolynomialMetric, validation report)``."""
    model = get_model(cfg["model"])
    f = cfg.get("fit")
    if f is None:
        raise ConfigurationError("config has no 'fit' section")
    lam = float(cfg.get("metric", {}).get("lambda", 0.5))
    tbox = _box(cfg["theta_box"])
    tpl = PolynomialMetric.template(model.n, model.p, int(f.get("degree", 2)), state_vars=f.get("state_vars"),
                                    theta_degree=f.get("theta_degree"))
    xs = _state_grid(f, model.n)
    settings = FitSettings(margin=f.get("margin", 1e-2), max_iters=f.get("max_iters", 4000),
                           max_samples=f.get("max_samples", 6000), learning_rate=f.get("learning_rate", 0.05),
                           seed=f.get("seed", 0))
    th = tbox.grid(int(f.get("theta_points", 3)))
    poly = fit_metric_coeffs(model, tpl, lam, xs, tbox, theta_samples=th, settings=settings)
    kc = int(f.get("check_points", 0))
    if kc:
        # exchange refinement against a finer state grid, warm-started from the first fit
        settings.max_iters = f.get("refine_iters", settings.max_iters)
        poly = refine_metric_fit(model, poly, lam, xs, tbox, _state_grid({**f, "x_points": kc}, model.n), th,
                                 theta_samples=th, settings=settings, rounds=int(f.get("refine_rounds", 6)))
    report = None
    k = int(f.get("validate_points", 0))
    if k:
        fine = _state_grid({**f, "x_points": k}, model.n)
        report = validate_uccm(poly.to_family(lam), model, fine, tbox.grid(int(f.get("theta_points", 3))))
        poly.meta["validation"] = {"grid_points": int(fine.shape[0]), "passed": report.passed,
                                   "c1_max_eig": report.details["c1_max_eig"],
                                   "c2_max_residual": report.details["c2_max_residual"]}
    return poly, report


# ---------------------------------------------------------------------------
# command line

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="univadapt", description="Adaptive control experiments and certificate tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    run = sub.add_parser("run", help="run an experiment preset")
    run.add_argument("experiment", choices=["ex1", "ex2"])
    common(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--trials", type=int)
    run.add_argument("--no-adaptation", action="store_true", help="run only the baseline arm without adaptation")
    run.add_argument("--static-reference", action="store_true", help="run only the static-reference arm")

    val = sub.add_parser("validate", help="check a certificate over a grid")
    val.add_argument("experiment", choices=["ex1", "ex2"], nargs="?")
    common(val)

    fit = sub.add_parser("fit-metric", help="fit a polynomial dual metric")
    common(fit)
    return p


def _overrides(args) -> dict:
    over = {}
    for key in ("seed", "trials"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "no_adaptation", False):
        over["arms"] = ["no_adaptation"]
    if getattr(args, "static_reference", False):
        over["arms"] = ["static"]
    if args.out is not None:
        over["output_dir"] = str(args.out)
    return over


def _print_summary(results):
    for arm, (s, _) in results.items():
        line = f"{arm}: {s.converged}/{s.trials} converged, {s.blowups} diverged"
        if s.time_avg_energy is not None:
            line += f", time-averaged energy {s.time_avg_energy:.6g}"
        print(line)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            if args.no_adaptation and args.experiment != "ex1":
                raise ConfigurationError("--no-adaptation applies to ex1")
            if args.static_reference and args.experiment != "ex2":
                raise ConfigurationError("--static-reference applies to ex2")
            cfg = load_config(args.config, args.experiment, _overrides(args))
            out = Path(cfg["output_dir"])
            out.mkdir(parents=True, exist_ok=True)   # fail on I/O before spending compute
            runner = run_monte_carlo_ex1 if args.experiment == "ex1" else run_tracking_ex2
            results = runner(cfg, workers=max(1, args.workers), out=out)
            _print_summary(results)
            print(f"results written to {out}")
            return EXIT_OK
        if args.command == "validate":
            cfg = load_config(args.config, args.experiment, _overrides(args))
            report = validate_certificate(cfg)
            text = json.dumps(report.to_dict(), indent=2)
            if args.out is not None:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "validation.json").write_text(text + "\n")
            print(text)
            for w in report.warnings:
                print(f"warning: {w}", file=sys.stderr)
            return EXIT_OK if report.passed else EXIT_VALIDATION
        if args.command == "fit-metric":
            cfg = load_config(args.config, None if args.config else "ex2", _overrides(args))
            poly, report = fit_metric(cfg)
            out = Path(cfg["output_dir"])
            out.mkdir(parents=True, exist_ok=True)
            poly.save(out / "metric.json")
            print(f"metric written to {out / 'metric.json'}")
            if report is not None:
                print(json.dumps(report.to_dict(), indent=2))
                return EXIT_OK if report.passed else EXIT_VALIDATION
            return EXIT_OK
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.report, indent=2), file=sys.stderr)
        return EXIT_VALIDATION
    except SynthesisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.worst, indent=2), file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
