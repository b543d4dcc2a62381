"""Certainty-equivalence feedback laws.

None of these functions takes the true parameter: they only ever see the
current estimate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleError
from .lyap import (UclfFamily, _bs_parts, _check_variant, backstepping_jac_x, backstepping_transform,
                   project_rate, uclf_value_and_grads)
from .sysmodel import SystemModel, input_term, uncertainty_term

__all__ = ["ControlOutput", "backstepping_control", "min_norm_clf", "min_norm_ccm", "min_norm_step",
           "project_rate"]

INFEASIBLE_B_NORM = 1e-12


@dataclass
class ControlOutput:
    u: np.ndarray
    constraint_active: np.ndarray
    slack: np.ndarray


def backstepping_control(x, theta_hat, variant: str = "derived"):
    """Backstepping law for the strict-feedback example evaluated at ``theta_hat``.

    The derived variant enforces ``zdot_3 = -z2 - 2 z3``.  The printed variant
    is the published closed form, kept for comparison.
    """
    _check_variant(variant)
    x1, x2, x3, th1, th2, sn, cs, s, g = _bs_parts(x, theta_hat)
    if variant == "derived":
        z = backstepping_transform(x, theta_hat, "derived")
        J = backstepping_jac_x(x, theta_hat, "derived")
        # xdot_1 = -s and xdot_2 = x3 under the estimate; xdot_3 = u
        return -z[..., 1] - 2.0 * z[..., 2] + J[..., 2, 0] * s - J[..., 2, 1] * x3
    s_x1 = 2.0 * th2 * x1 + th1 * cs
    g_x1 = 2.0 * th2 - th1 * sn
    return (s * (s_x1 * g + g_x1 * s - 2.0 * g - 1.0)
            - 2.0 * (x1 + x3 + 2.0 * (-th2 * x2 * x2 + x2 + 2.0 * x1 - th1 * sn) + s * g)
            - x2 - 2.0 * x1 + th2 * x1 * x1 + th1 * sn
            + x3 * (2.0 * th2 * x1 - 4.0 + th1 * cs))


def min_norm_step(a, b, u_ref, state=None) -> ControlOutput:
    """Solve ``min |u - u_ref|^2  s.t.  a + b.u <= 0`` in closed form.

    ``a`` has shape ``(...)`` and ``b``, ``u_ref`` shape ``(..., m)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u_ref = np.broadcast_to(np.asarray(u_ref, dtype=float), b.shape)
    resid = a + np.einsum("...i,...i->...", b, u_ref)
    bb = np.einsum("...i,...i->...", b, b)
    active = resid > 0
    if np.any(active & (np.sqrt(bb) < INFEASIBLE_B_NORM)):
        raise InfeasibleError("decrement condition violated where the input has no authority", state=state)
    scale = np.where(active, resid / np.where(active, bb, 1.0), 0.0)
    u = u_ref - scale[..., None] * b
    slack = a + np.einsum("...i,...i->...", b, u)
    slack = np.where(active, 0.0, slack)
    return ControlOutput(u=u, constraint_active=active, slack=slack)


def min_norm_clf(model: SystemModel, uclf: UclfFamily, x, theta_hat, t: float = 0.0,
                 u_ref=None) -> ControlOutput:
    """Smallest input meeting ``dV/dx (f - Delta^T theta_hat + B u) <= -c V``."""
    x = np.asarray(x, dtype=float)
    ev = uclf_value_and_grads(uclf, x, theta_hat)
    drift = model.f(x, t) - uncertainty_term(model, x, theta_hat, t)
    a = np.einsum("...i,...i->...", ev.dV_dx, drift) + uclf.decrement_rate * ev.V
    b = np.einsum("...i,...im->...m", ev.dV_dx, model.input_matrix(x, t))
    if u_ref is None:
        u_ref = np.zeros(b.shape)
    return min_norm_step(a, b, u_ref, state=x)


def min_norm_ccm(model: SystemModel, metric, geodesic, x, x_d, u_d, theta_hat, t: float = 0.0,
                 x_d_dot=None) -> ControlOutput:
    """Input closest to ``u_d`` with certainty-equivalence ``Edot <= -2 lambda E``.

    The decrement is built from the geodesic's endpoint covectors (see
    :mod:`univadapt.geom.geodesic`).  ``x_d_dot`` defaults to the reference
    velocity under the estimate, ``f(x_d) - Delta(x_d)^T theta_hat + B(x_d) u_d``.
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    if x_d_dot is None:
        x_d_dot = (model.f(x_d, t) - uncertainty_term(model, x_d, theta_hat, t)
                   + input_term(model, x_d, u_d, t))
    g0, g1 = geodesic.start_covector, geodesic.end_covector
    drift = model.f(x, t) - uncertainty_term(model, x, theta_hat, t)
    a = (2.0 * g1 @ drift - 2.0 * g0 @ x_d_dot + geodesic.energy_dt
         + 2.0 * metric.lam * geodesic.energy)
    b = 2.0 * g1 @ model.input_matrix(x, t)
    return min_norm_step(a, b, u_d, state=x)
