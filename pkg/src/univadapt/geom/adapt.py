"""Adaptation law and energy-rate bookkeeping for metric certificates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import PreconditionError
from ..lyap import AdaptGains, AdaptState, ScalingFunction, project_rate, rate_scaling_rhs
from ..sysmodel import ParameterBox, SystemModel, input_term, uncertainty_term
from .geodesic import Geodesic, energy_param_grad
from .metric import MetricFamily


def estimate_rate_uccm(model: SystemModel, gains: AdaptGains, upsilon, x, geodesic: Geodesic, theta_hat=None,
                       t: float = 0.0, box: Optional[ParameterBox] = None):
    """``-upsilon Gamma Delta(x) M(x) gamma_s(1)``, projected onto ``box`` when given."""
    rate = -upsilon * gains.gamma @ (model.regressor(np.asarray(x, dtype=float), t) @ geodesic.end_covector)
    if box is not None:
        rate = project_rate(theta_hat, rate, box)
    return rate


def adapt_rhs_uccm(model: SystemModel, metric: MetricFamily, scaling: ScalingFunction, gains: AdaptGains,
                   x, x_d, state: AdaptState, geodesic: Geodesic, t: float = 0.0,
                   box: Optional[ParameterBox] = None, energy_grad=None, require_converged: bool = True):
    """Return ``(theta_hat_dot, rho_dot)``.

    ``theta_hat_dot = -upsilon Gamma Delta(x) M(x) gamma_s(1)`` with the
    geodesic's end covector standing in for ``M(x) gamma_s(1)``.
    """
    if require_converged and not geodesic.converged:
        raise PreconditionError("adaptation law needs a converged geodesic")
    x = np.asarray(x, dtype=float)
    if not (np.allclose(geodesic.nodes[-1], x) and np.allclose(geodesic.nodes[0], x_d)):
        raise PreconditionError("geodesic endpoints do not match (x_d, x)")
    theta_hat = np.asarray(state.theta_hat, dtype=float)
    theta_hat_dot = estimate_rate_uccm(model, gains, scaling.value(state.rho), x, geodesic, theta_hat, t, box)
    if energy_grad is None:
        energy_grad = energy_param_grad(metric, geodesic, theta_hat, t, require_converged=require_converged)
    rho_dot = rate_scaling_rhs(scaling, state.rho, geodesic.energy, energy_grad, theta_hat_dot, gains.eta)
    return theta_hat_dot, float(rho_dot)


@dataclass
class EnergyRateReport:
    """Labelled terms of half the energy rate along the closed loop."""

    term_estimated_system: float
    term_reference_model: float
    term_mismatch: float
    term_param_drift: float
    term_time: float

    @property
    def total(self) -> float:
        return (self.term_estimated_system + self.term_reference_model + self.term_mismatch
                + self.term_param_drift + self.term_time)


def energy_rate_report(model: SystemModel, metric: MetricFamily, geodesic: Geodesic, x, x_d, u, u_d,
                       state: AdaptState, theta_true, t: float = 0.0, theta_hat_dot=None,
                       x_d_dot=None) -> EnergyRateReport:
    """Split ``Edot / 2`` into estimated-system, reference, mismatch, drift and time terms.

    ``x_d_dot`` defaults to ``f(x_d) - Delta(x_d)^T theta_hat + B(x_d) u_d``;
    pass the reference generator's actual velocity when it differs.
    ``theta_hat_dot`` defaults to zero (no drift term).
    """
    if not geodesic.converged:
        raise PreconditionError("energy rate requested on an unconverged geodesic")
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    u_d = np.atleast_1d(np.asarray(u_d, dtype=float))
    theta_hat = np.asarray(state.theta_hat, dtype=float)
    g0, g1 = geodesic.start_covector, geodesic.end_covector
    est = model.f(x, t) - uncertainty_term(model, x, theta_hat, t) + input_term(model, x, u, t)
    if x_d_dot is None:
        x_d_dot = model.f(x_d, t) - uncertainty_term(model, x_d, theta_hat, t) + input_term(model, x_d, u_d, t)
    err = theta_hat - np.asarray(theta_true, dtype=float)
    mismatch = g1 @ uncertainty_term(model, x, err, t)
    drift = 0.0
    if theta_hat_dot is not None:
        drift = 0.5 * float(energy_param_grad(metric, geodesic, theta_hat, t) @ np.asarray(theta_hat_dot))
    return EnergyRateReport(term_estimated_system=float(g1 @ est), term_reference_model=float(-g0 @ x_d_dot),
                            term_mismatch=float(mismatch), term_param_drift=drift,
                            term_time=0.5 * geodesic.energy_dt)
