"""Pointwise contraction conditions on the dual metric and grid validators.

C1: ``B_perp^T (W A^T + A W - Wdot + 2 lambda W) B_perp <= 0``
C2: ``d_{b_i} W - W (db_i/dx)^T - (db_i/dx) W = 0`` for every input column.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DegeneracyError, NumericError
from ..sysmodel import SystemModel, closed_loop_jacobian, eval_dynamics
from .metric import MetricFamily

log = logging.getLogger(__name__)

C1_TOL = 1e-8
C2_TOL = 1e-8


def annihilator(B, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the null space of ``B^T`` (``n x (n - m)``); batches allowed."""
    B = np.asarray(B, dtype=float)
    n, m = B.shape[-2], B.shape[-1]
    U, S, _ = np.linalg.svd(B, full_matrices=True)
    if m > 0:
        smax = S.max(axis=-1, keepdims=True)
        if np.any(S.min(axis=-1) <= rank_tol * np.maximum(smax[..., 0], 1e-300)) or np.any(smax == 0):
            raise DegeneracyError("input matrix B is not full column rank")
    return U[..., :, m:]


def dual_rate(metric: MetricFamily, x, theta, t, x_dot):
    """``Wdot = dW/dt + sum_k dW/dx_k xdot_k`` (no parameter-adaptation term)."""
    dW = metric.d_dual_dx(x, theta, t)
    return metric.d_dual_dt(x, theta, t) + np.einsum("...kij,...k->...ij", dW, x_dot)


def c1_matrix(metric: MetricFamily, model: SystemModel, x, theta, u, t=0.0, x_dot=None):
    """Full (unprojected) C1 matrix."""
    x = np.asarray(x, dtype=float)
    if x_dot is None:
        x_dot = eval_dynamics(model, x, theta, u, t)
    A = closed_loop_jacobian(model, x, theta, u, t)
    W = metric.dual(x, theta, t)
    WA = W @ np.swapaxes(A, -1, -2)
    return WA + np.swapaxes(WA, -1, -2) - dual_rate(metric, x, theta, t, x_dot) + 2.0 * metric.lam * W


@dataclass
class C1Result:
    max_eig: np.ndarray
    passed: bool


@dataclass
class C2Result:
    residuals: np.ndarray
    passed: bool


def check_c1(metric: MetricFamily, model: SystemModel, x, theta, u, t=0.0, x_dot=None,
             tol: float = C1_TOL) -> C1Result:
    S = c1_matrix(metric, model, x, theta, u, t, x_dot)
    asym = np.abs(S - np.swapaxes(S, -1, -2)).max() if S.size else 0.0
    if asym > 1e-10 * max(1.0, np.abs(S).max()):
        raise NumericError(f"assembled C1 matrix is not symmetric (deviation {asym:.3e})")
    Bp = annihilator(model.input_matrix(np.asarray(x, dtype=float), t))
    if Bp.shape[-1] == 0:
        max_eig = np.full(S.shape[:-2], -np.inf)
    else:
        P = np.swapaxes(Bp, -1, -2) @ S @ Bp
        max_eig = np.linalg.eigvalsh(0.5 * (P + np.swapaxes(P, -1, -2)))[..., -1]
    return C1Result(max_eig=max_eig, passed=bool(np.all(max_eig <= tol)))


def c2_residual_matrices(metric: MetricFamily, model: SystemModel, x, theta, t=0.0):
    x = np.asarray(x, dtype=float)
    W = metric.dual(x, theta, t)
    dW = metric.d_dual_dx(x, theta, t)
    Bm = model.input_matrix(x, t)
    Jb = model.jac_b(x, t)
    dbW = np.einsum("...kij,...km->...mij", dW, Bm)
    WJ = np.einsum("...ij,...mkj->...mik", W, Jb)
    JW = np.einsum("...mik,...kj->...mij", Jb, W)
    return dbW - WJ - JW


def check_c2(metric: MetricFamily, model: SystemModel, x, theta, t=0.0, tol: float = C2_TOL) -> C2Result:
    R = c2_residual_matrices(metric, model, x, theta, t)
    res = np.sqrt(np.einsum("...ij,...ij->...", R, R))
    return C2Result(residuals=res, passed=bool(np.all(res <= tol)))


# ---------------------------------------------------------------------------
# Grid validators

@dataclass
class ValidationReport:
    kind: str
    passed: bool
    n_points: int
    worst_value: float = float("nan")
    worst_point: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, dict):
                return {k: clean(w) for k, w in v.items()}
            return v
        return {"kind": self.kind, "passed": self.passed, "n_points": self.n_points,
                "worst_value": clean(self.worst_value), "worst_point": clean(self.worst_point),
                "details": clean(self.details), "warnings": list(self.warnings)}


def pair_grid(x_grid, theta_grid):
    """Cartesian product of state and parameter samples, returned as two aligned arrays."""
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    theta_grid = np.atleast_2d(np.asarray(theta_grid, dtype=float))
    xs = np.repeat(x_grid, theta_grid.shape[0], axis=0)
    ths = np.tile(theta_grid, (x_grid.shape[0], 1))
    return xs, ths


def validate_uccm(metric: MetricFamily, model: SystemModel, x_grid, theta_grid, u_samples=None,
                  t: float = 0.0, c1_tol: float = C1_TOL, c2_tol: float = C2_TOL,
                  chunk: int = 20000) -> ValidationReport:
    """Evaluate C1 (for every sampled input) and C2 over the product grid."""
    x_grid = np.asarray(x_grid, dtype=float).reshape(-1, model.n)
    theta_grid = np.asarray(theta_grid, dtype=float).reshape(-1, model.p)
    if x_grid.shape[0] == 0 or theta_grid.shape[0] == 0:
        return ValidationReport("uccm", True, 0, warnings=["empty grid: vacuous pass"])
    u_samples = np.zeros((1, model.m)) if u_samples is None else np.asarray(u_samples, float).reshape(-1, model.m)
    xs, ths = pair_grid(x_grid, theta_grid)
    worst_c1, worst_c1_at = -np.inf, None
    worst_c2, worst_c2_at = 0.0, None
    for lo in range(0, xs.shape[0], chunk):
        xc, tc = xs[lo:lo + chunk], ths[lo:lo + chunk]
        for u in u_samples:
            uc = np.broadcast_to(u, (xc.shape[0], model.m))
            r1 = check_c1(metric, model, xc, tc, uc, t, tol=c1_tol)
            k = int(np.argmax(r1.max_eig))
            if r1.max_eig[k] > worst_c1:
                worst_c1, worst_c1_at = float(r1.max_eig[k]), (xc[k], tc[k], u)
        r2 = check_c2(metric, model, xc, tc, t, tol=c2_tol)
        mx = r2.residuals.max(axis=-1) if r2.residuals.ndim > 1 else r2.residuals
        k = int(np.argmax(mx))
        if mx[k] > worst_c2 or worst_c2_at is None:
            worst_c2, worst_c2_at = float(mx[k]), (xc[k], tc[k])
    c1_ok = worst_c1 <= c1_tol
    c2_ok = worst_c2 <= c2_tol
    details = {"c1_max_eig": worst_c1, "c1_passed": c1_ok, "c2_max_residual": worst_c2, "c2_passed": c2_ok,
               "c2_worst_point": {"x": worst_c2_at[0], "theta": worst_c2_at[1]}}
    worst_point = {"x": worst_c1_at[0], "theta": worst_c1_at[1], "u": worst_c1_at[2]}
    n_points = xs.shape[0] * u_samples.shape[0]
    return ValidationReport("uccm", c1_ok and c2_ok, n_points, worst_c1, worst_point, details)


def validate_uclf(model: SystemModel, uclf, x_grid, theta_grid, t: float = 0.0,
                  a_tol: float = 1e-9, b_tol: float = 1e-9) -> ValidationReport:
    """Check the decrement infimum is attainable: the input must have authority wherever the drift fails."""
    from ..lyap import uclf_value_and_grads
    from ..sysmodel import uncertainty_term

    x_grid = np.asarray(x_grid, dtype=float).reshape(-1, model.n)
    theta_grid = np.asarray(theta_grid, dtype=float).reshape(-1, model.p)
    if x_grid.shape[0] == 0 or theta_grid.shape[0] == 0:
        return ValidationReport("uclf", True, 0, warnings=["empty grid: vacuous pass"])
    xs, ths = pair_grid(x_grid, theta_grid)
    ev = uclf_value_and_grads(uclf, xs, ths)
    drift = model.f(xs, t) - uncertainty_term(model, xs, ths, t)
    a = np.einsum("ki,ki->k", ev.dV_dx, drift) + uclf.decrement_rate * ev.V
    b = np.einsum("ki,kim->km", ev.dV_dx, model.input_matrix(xs, t))
    bnorm = np.linalg.norm(b, axis=-1)
    excess = a - a_tol * (1.0 + ev.V)
    bad = (excess > 0) & (bnorm <= b_tol)
    # rank points by how much drift excess is left without input authority
    score = np.where(bnorm <= b_tol, excess, -np.inf)
    k = int(np.argmax(score))
    worst = {"x": xs[k], "theta": ths[k], "a": a[k], "b_norm": bnorm[k]}
    required = np.where(a > 0, a / np.maximum(bnorm, 1e-300), 0.0)
    return ValidationReport("uclf", not bool(np.any(bad)), xs.shape[0], float(score[k]), worst,
                            {"infeasible_points": int(bad.sum()), "max_required_input": float(required.max())})
