"""Fixed-step closed-loop simulation with logging.

Two loops are provided.  :func:`simulate_uclf_batch` integrates plant,
estimate and ``rho`` for a whole batch of trials at once (all model and
certificate maps broadcast over the batch axis); the feedback law is
re-evaluated at every Runge-Kutta stage.  :func:`simulate_uccm` solves one
geodesic per step and holds it, together with the min-norm input and the
adaptation rates, over the step.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .control import min_norm_ccm
from .errors import ConfigurationError, DivergenceError, InfeasibleError
from .geom.adapt import estimate_rate_uccm
from .geom.geodesic import energy_param_grad, solve_geodesic
from .lyap import (AdaptGains, AdaptState, ScalingFunction, UclfFamily, estimate_rate_uclf, uclf_value_and_grads,
                   upsilon_rate)
from .sysmodel import ParameterBox, SystemModel, input_term, uncertainty_term

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    dt: float = 0.005
    t_final: float = 20.0
    integrator: str = "rk4"
    projection: bool = False
    log_stride: int = 1
    divergence_threshold: float = 1e6
    adapt: bool = True            # False holds theta_hat and rho at their initial values
    freeze_rho: bool = False
    geodesic_policy: str = "reuse"  # or "abort"
    geodesic_segments: int = 20

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.t_final < self.dt:
            raise ConfigurationError("t_final must be at least dt")
        if self.integrator not in ("rk4", "euler"):
            raise ConfigurationError(f"unknown integrator {self.integrator!r}")
        if self.log_stride < 1:
            raise ConfigurationError("log_stride must be >= 1")
        if self.geodesic_policy not in ("reuse", "abort"):
            raise ConfigurationError(f"unknown geodesic policy {self.geodesic_policy!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


def rk4_step(field: Callable, state, t: float, dt: float):
    """Classical four-stage Runge-Kutta step of ``state' = field(state, t)``."""
    k1 = field(state, t)
    k2 = field(state + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(state + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(state + dt * k3, t + dt)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after RK4 step at t={t:.6g}", t=t,
                              state_norm=float(np.linalg.norm(np.nan_to_num(state))))
    return out


def euler_step(field: Callable, state, t: float, dt: float):
    out = state + dt * field(state, t)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after Euler step at t={t:.6g}", t=t)
    return out


def _step_batch(field, Z, t, dt, integrator):
    """Like :func:`rk4_step` but tolerant of non-finite rows (they are flagged by the caller)."""
    with np.errstate(all="ignore"):
        if integrator == "euler":
            return Z + dt * field(Z, t)
        k1 = field(Z, t)
        k2 = field(Z + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = field(Z + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = field(Z + dt * k3, t + dt)
        return Z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _gamma_inverse(gains):
    """``Gamma^{-1}``; NaN-filled when Gamma is singular, so the composite logs as NaN."""
    try:
        return np.linalg.inv(gains.gamma)
    except np.linalg.LinAlgError:
        return np.full_like(gains.gamma, np.nan)


def _true_dynamics(model, x, theta, u, t):
    return model.f(x, t) - uncertainty_term(model, x, theta, t) + input_term(model, x, u, t)


# ---------------------------------------------------------------------------

SERIES = ("x", "theta_hat", "rho", "upsilon", "u", "certificate", "composite", "x_d", "u_d",
          "geodesic_residual", "constraint_active")


@dataclass
class TrajectoryLog:
    times: np.ndarray
    x: np.ndarray
    theta_hat: np.ndarray
    rho: np.ndarray
    upsilon: np.ndarray
    u: np.ndarray
    certificate: np.ndarray
    composite: np.ndarray
    x_d: np.ndarray
    u_d: np.ndarray
    geodesic_residual: np.ndarray
    constraint_active: np.ndarray
    diverged: bool = False
    failure: str = ""
    wall_time: float = 0.0
    events: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.shape[0]

    def columns(self):
        cols = [("t", self.times)]
        for name in SERIES:
            arr = np.asarray(getattr(self, name))
            if arr.ndim == 1:
                cols.append((name, arr))
            else:
                cols.extend((f"{name}_{i}", arr[:, i]) for i in range(arr.shape[1]))
        return cols

    def to_csv(self, path=None) -> str:
        cols = self.columns()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([name for name, _ in cols])
        for row in zip(*(c for _, c in cols)):
            w.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @property
    def tracking_error(self) -> np.ndarray:
        return np.linalg.norm(self.x - self.x_d, axis=-1)

    def final_error(self) -> float:
        return float(self.tracking_error[-1]) if len(self) else math.nan

    def final_certificate(self) -> float:
        return float(np.ravel(self.certificate)[-1]) if len(self) else math.nan

    def converged(self, threshold: float, by: str = "error") -> bool:
        """Not diverged and the final ``error`` norm (or ``certificate``) is below ``threshold``."""
        final = self.final_error() if by == "error" else self.final_certificate()
        return (not self.diverged) and final < threshold

    def summary(self, threshold: Optional[float] = None) -> dict:
        out = {"final_error_norm": self.final_error(),
               "final_certificate": self.final_certificate(),
               "upsilon_min": float(self.upsilon.min()) if len(self) else math.nan,
               "upsilon_max": float(self.upsilon.max()) if len(self) else math.nan,
               "diverged": self.diverged, "failure": self.failure, "wall_time": self.wall_time,
               "steps_logged": len(self)}
        if threshold is not None:
            out["converged"] = self.converged(threshold)
        out.update({k: v for k, v in self.events.items()})
        return out


def _split_logs(buf, diverged_at, failure, wall, n_trials):
    logs = []
    for b in range(n_trials):
        end = buf["times"].shape[0] if diverged_at[b] < 0 else diverged_at[b] + 1
        kw = {k: (v[:end] if k == "times" else v[:end, b]) for k, v in buf.items()}
        logs.append(TrajectoryLog(**kw, diverged=diverged_at[b] >= 0, failure=failure[b], wall_time=wall))
    return logs


# ---------------------------------------------------------------------------
# Lyapunov-certificate loop

def simulate_uclf_batch(model: SystemModel, uclf: UclfFamily, scaling: ScalingFunction, gains: AdaptGains,
                        controller: Callable, x0, theta_true, adapt_state0: AdaptState, config: SimConfig,
                        box: Optional[ParameterBox] = None) -> list:
    """Regulate every row of ``x0`` (shape ``(B, n)``) to the origin.

    ``controller(x, theta_hat, t)`` returns inputs of shape ``(B, m)``; it
    never sees ``theta_true``.  ``adapt_state0.theta_hat`` may be ``(p,)`` or
    ``(B, p)``.  A trial whose state norm exceeds the divergence threshold
    (or turns non-finite) is frozen and reported as diverged.

    The scaling state is integrated as ``upsilon`` rather than ``rho`` (see
    :func:`upsilon_rate`) and saturated to ``scaling.value_range``; ``rho`` is
    recovered for the log.
    """
    start = time.perf_counter()
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    B, n, p, m = x0.shape[0], model.n, model.p, model.m
    theta_true = np.broadcast_to(np.asarray(theta_true, dtype=float), (B, p))
    th0 = np.broadcast_to(np.asarray(adapt_state0.theta_hat, dtype=float), (B, p))
    ups0 = np.broadcast_to(scaling.value(np.asarray(adapt_state0.rho, dtype=float)), (B,))
    if config.projection and box is None:
        raise ConfigurationError("projection enabled but no parameter box given")
    use_box = box if config.projection else None
    ups_lo, ups_hi = scaling.value_range

    def split(Z):
        return Z[:, :n], Z[:, n:n + p], Z[:, n + p]

    def rates(Z, t, th_true):
        x, th, ups = split(Z)
        u = controller(x, th, t)
        out = np.empty_like(Z)
        out[:, :n] = _true_dynamics(model, x, th_true, u, t)
        if config.adapt:
            ev = uclf_value_and_grads(uclf, x, th)
            # RK4 stage estimates may poke out of the box; only step ends are clipped
            th_at = use_box.clip(th) if use_box is not None else th
            th_dot = estimate_rate_uclf(model, gains, ups, x, ev.dV_dx, th_at, t, use_box)
            out[:, n:n + p] = th_dot
            out[:, n + p] = 0.0 if config.freeze_rho else upsilon_rate(ups, ev.V, ev.dV_dtheta, th_dot, gains.eta)
        else:
            out[:, n:] = 0.0
        return out

    def field(Z, t):
        # stage states of a row that is blowing up get NaN rates; the step loop then marks it diverged
        ok = np.all(np.isfinite(Z), axis=1)
        ok[ok] = np.linalg.norm(Z[ok, :n], axis=1) <= config.divergence_threshold
        if np.all(ok):
            return rates(Z, t, theta_true)
        out = np.full_like(Z, np.nan)
        if np.any(ok):
            out[ok] = rates(Z[ok], t, theta_true[ok])
        return out

    Z = np.concatenate([x0, th0, ups0[:, None]], axis=1)
    n_steps = config.n_steps
    n_log = n_steps // config.log_stride + 1
    buf = {"times": np.zeros(n_log), "x": np.zeros((n_log, B, n)), "theta_hat": np.zeros((n_log, B, p)),
           "rho": np.zeros((n_log, B)), "upsilon": np.zeros((n_log, B)), "u": np.zeros((n_log, B, m)),
           "certificate": np.zeros((n_log, B)), "composite": np.zeros((n_log, B)),
           "x_d": np.zeros((n_log, B, n)), "u_d": np.zeros((n_log, B, m)),
           "geodesic_residual": np.zeros((n_log, B)), "constraint_active": np.zeros((n_log, B))}
    diverged_at = np.full(B, -1)
    failure = [""] * B
    saturated = np.zeros(B, dtype=int)
    alive = np.ones(B, dtype=bool)
    gamma_inv = _gamma_inverse(gains)

    def record(j, t, Z):
        x, th, ups = split(Z)
        V = uclf_value_and_grads(uclf, x, th).V
        err = th - theta_true
        buf["times"][j] = t
        buf["x"][j] = x
        buf["theta_hat"][j] = th
        buf["rho"][j] = scaling.inverse(ups)
        buf["upsilon"][j] = ups
        buf["u"][j] = controller(x, th, t)
        buf["certificate"][j] = V
        buf["composite"][j] = ups * (V + gains.eta) + 0.5 * np.einsum("bi,ij,bj->b", err, gamma_inv, err)

    record(0, 0.0, Z)
    for k in range(n_steps):
        t = k * config.dt
        Znew = _step_batch(field, Z, t, config.dt, config.integrator)
        bad = alive & ~(np.all(np.isfinite(Znew), axis=1)
                        & (np.linalg.norm(np.nan_to_num(Znew[:, :n], nan=np.inf), axis=1)
                           <= config.divergence_threshold))
        for b in np.nonzero(bad)[0]:
            diverged_at[b] = k // config.log_stride
            failure[b] = f"diverged at t={t + config.dt:.4g}"
        alive &= ~bad
        Znew[~alive] = Z[~alive]
        ups = Znew[:, n + p]
        out_of_range = (ups < ups_lo) | (ups > ups_hi)
        if np.any(out_of_range):
            saturated += out_of_range
            Znew[:, n + p] = np.clip(ups, ups_lo, ups_hi)
        if use_box is not None:
            Znew[:, n:n + p] = use_box.clip(Znew[:, n:n + p])
        Z = Znew
        if (k + 1) % config.log_stride == 0:
            record((k + 1) // config.log_stride, (k + 1) * config.dt, Z)
    if saturated.any():
        log.warning("scaling saturated at rho = +/-%g in %d trials", scaling.rho_max, int((saturated > 0).sum()))
    logs = _split_logs(buf, diverged_at, failure, time.perf_counter() - start, B)
    for lg, count in zip(logs, saturated):
        lg.events["rho_saturation_steps"] = int(count)
    return logs


def simulate_uclf(model: SystemModel, uclf: UclfFamily, scaling: ScalingFunction, gains: AdaptGains,
                  controller: Callable, x0, theta_true, adapt_state0: AdaptState, config: SimConfig,
                  box: Optional[ParameterBox] = None) -> TrajectoryLog:
    """Single-trial wrapper around :func:`simulate_uclf_batch`."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    return simulate_uclf_batch(model, uclf, scaling, gains, controller, x0, theta_true, adapt_state0,
                               config, box)[0]


# ---------------------------------------------------------------------------
# Reference generation for the contracting example

def reference_ex2(theta_hat, t: float, internal_state: float, dt: Optional[float] = None):
    """Reference built with ``theta_d = (theta_hat_1, theta_hat_2, 0, 0)`` and ``x_1d = sin t``.

    Returns ``(x_d, x_d_dot, u_d, new_internal_state)``.  The internal state is
    ``x_2d``; it is advanced by one RK4 step of ``dt`` (estimate frozen) when
    ``dt`` is given, otherwise returned unchanged.
    """
    th1, th2 = float(theta_hat[0]), float(theta_hat[1])
    x2d = float(internal_state)
    s, c = math.sin(t), math.cos(t)
    x_d = np.array([s, x2d, c + th1 * s])
    x2d_dot = -x2d - th2 * s * s
    x3d_dot = -s + th1 * c
    x_d_dot = np.array([c, x2d_dot, x3d_dot])
    u_d = x3d_dot - math.tanh(x2d)
    new = x2d
    if dt is not None:
        new = float(rk4_step(lambda z, tt: np.array([-z[0] - th2 * math.sin(tt) ** 2]),
                             np.array([x2d]), t, dt)[0])
    return x_d, x_d_dot, np.array([u_d]), new


@dataclass
class ReferenceModel:
    """Reference generator; ``static`` mode pins the estimate used to the initial one."""

    mode: str = "adaptive"
    internal0: float = 0.0
    generator: Callable = reference_ex2

    def __post_init__(self):
        if self.mode not in ("adaptive", "static"):
            raise ConfigurationError(f"unknown reference mode {self.mode!r}")

    def internal_rate(self, theta_ref, t, internal):
        return -internal - float(theta_ref[1]) * math.sin(t) ** 2

    def evaluate(self, theta_ref, t, internal):
        x_d, x_d_dot, u_d, _ = self.generator(theta_ref, t, internal)
        return x_d, x_d_dot, u_d


def feedforward_input(model: SystemModel, x_d, x_d_dot, theta_hat, t=0.0):
    """Least-squares input making ``x_d`` a trajectory of the estimated model."""
    rhs = x_d_dot - model.f(x_d, t) + uncertainty_term(model, x_d, theta_hat, t)
    sol, *_ = np.linalg.lstsq(model.input_matrix(x_d, t), rhs, rcond=None)
    return sol


# ---------------------------------------------------------------------------
# Metric-certificate loop

def simulate_uccm(model: SystemModel, metric, scaling: ScalingFunction, gains: AdaptGains,
                  reference: ReferenceModel, x0, theta_true, adapt_state0: AdaptState, config: SimConfig,
                  box: Optional[ParameterBox] = None) -> TrajectoryLog:
    """Track the reference with the min-norm contraction controller and the metric adaptation law."""
    start = time.perf_counter()
    n, p, m = model.n, model.p, model.m
    if config.projection and box is None:
        raise ConfigurationError("projection enabled but no parameter box given")
    use_box = box if config.projection else None
    theta_true = np.asarray(theta_true, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    th = np.asarray(adapt_state0.theta_hat, dtype=float).copy()
    ups = float(scaling.value(adapt_state0.rho))
    ups_lo, ups_hi = scaling.value_range
    th_static = th.copy()
    internal = float(reference.internal0)
    dt = config.dt
    n_steps = config.n_steps
    rows = {k: [] for k in ("times",) + SERIES}
    prev = None
    events = {"geodesic_unconverged": 0, "infeasible_steps": 0, "projection_clips": 0, "rho_saturation_steps": 0,
              "max_geodesic_iterations": 0}
    diverged, failure = False, ""
    gamma_inv = _gamma_inverse(gains)

    for k in range(n_steps + 1):
        t = k * dt
        th_ref = th if reference.mode == "adaptive" else th_static
        x_d, x_d_dot, u_d = reference.evaluate(th_ref, t, internal)
        geo = solve_geodesic(metric, th, x_d, x, t, warm_start=prev, n_segments=config.geodesic_segments)
        events["max_geodesic_iterations"] = max(events["max_geodesic_iterations"], geo.iterations)
        if not geo.converged:
            events["geodesic_unconverged"] += 1
            if config.geodesic_policy == "abort":
                diverged, failure = True, f"geodesic did not converge at t={t:.4g}"
                break
        u_ff = feedforward_input(model, x_d, x_d_dot, th, t)
        try:
            ctrl = min_norm_ccm(model, metric, geo, x, x_d, u_ff, th, t, x_d_dot=x_d_dot)
            u, active = ctrl.u, float(ctrl.constraint_active)
        except InfeasibleError:
            events["infeasible_steps"] += 1
            u, active = u_ff, -1.0
        if config.adapt:
            th_dot = estimate_rate_uccm(model, gains, ups, x, geo, th, t, use_box)
            if config.freeze_rho:
                ups_dot = 0.0
            else:
                dE = energy_param_grad(metric, geo, th, t, require_converged=False)
                ups_dot = float(upsilon_rate(ups, geo.energy, dE, th_dot, gains.eta))
        else:
            th_dot, ups_dot = np.zeros(p), 0.0

        if k % config.log_stride == 0:
            err = th - theta_true
            rows["times"].append(t)
            rows["x"].append(x.copy())
            rows["theta_hat"].append(th.copy())
            rows["rho"].append(float(scaling.inverse(ups)))
            rows["upsilon"].append(ups)
            rows["u"].append(np.atleast_1d(u).copy())
            rows["certificate"].append(geo.energy)
            rows["composite"].append(ups * (geo.energy + gains.eta) + 0.5 * err @ gamma_inv @ err)
            rows["x_d"].append(x_d)
            rows["u_d"].append(np.atleast_1d(u_d))
            rows["geodesic_residual"].append(geo.residual)
            rows["constraint_active"].append(active)
        if k == n_steps:
            break

        # feedback correction held over the step; the feedforward part follows the reference inside it
        u_fb = np.atleast_1d(u) - np.atleast_1d(u_ff)

        def field(z, tt):
            out = np.empty_like(z)
            xd_s, xd_dot_s, _ = reference.evaluate(th_ref, tt, z[n])
            u_s = u_fb + np.atleast_1d(feedforward_input(model, xd_s, xd_dot_s, th, tt))
            out[:n] = _true_dynamics(model, z[:n], theta_true, u_s, tt)
            out[n] = reference.internal_rate(th_ref, tt, z[n])
            return out

        try:
            z = rk4_step(field, np.concatenate([x, [internal]]), t, dt)
        except DivergenceError as exc:
            diverged, failure = True, str(exc)
            break
        x, internal = z[:n], float(z[n])
        th = th + dt * th_dot
        # exact update of upsilon' = -upsilon * D for D held over the step
        if ups > 0 and ups_dot != 0.0:
            ups = ups * math.exp(dt * ups_dot / ups)
        if not ups_lo <= ups <= ups_hi:
            events["rho_saturation_steps"] += 1
            ups = min(max(ups, ups_lo), ups_hi)
        if use_box is not None:
            clipped = use_box.clip(th)
            if np.any(clipped != th):
                events["projection_clips"] += 1
                th = clipped
        if np.linalg.norm(x) > config.divergence_threshold:
            diverged, failure = True, f"diverged at t={t + dt:.4g}"
            break
        prev = geo

    if events["geodesic_unconverged"]:
        log.warning("%d geodesic solves did not converge; best iterate reused", events["geodesic_unconverged"])
    if events["projection_clips"]:
        log.info("estimate clipped back into the parameter box %d times", events["projection_clips"])
    arrays = {k: np.array(v, dtype=float) for k, v in rows.items()}
    return TrajectoryLog(**arrays, diverged=diverged, failure=failure, wall_time=time.perf_counter() - start,
                         events=events)
