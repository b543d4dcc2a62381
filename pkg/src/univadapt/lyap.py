"""Parameter-dependent Lyapunov certificates and the rate-scaled adaptation law.

A certificate family ``V_theta(x) = 0.5 |z_theta(x)|^2`` is built from a state
transformation.  The estimate ``theta_hat`` moves along
``-upsilon(rho) Gamma Delta dV/dx^T`` while the scalar ``rho`` re-scales the
effective gain so that the term ``upsilon * sum_i dV/dtheta_i * thetadot_i``
never enters the composite function's derivative.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, InvariantViolation, NumericError
from .sysmodel import ParameterBox, SystemModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScalingFunction:
    """``upsilon(rho) = a * exp(rho / c) + b`` with ``a, b, c > 0``.

    ``rho`` is clamped to ``[-rho_max, rho_max]`` before evaluation so the
    exponential cannot overflow; inside the clamp the function is frozen.
    """

    a: float = 0.9
    b: float = 0.1
    c: float = 5.0
    rho_max: float = 500.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.c > 0):
            raise ConfigurationError("scaling parameters a, b, c must all be positive")
        if not self.rho_max > 0:
            raise ConfigurationError("rho_max must be positive")

    def clamp(self, rho):
        return np.clip(rho, -self.rho_max, self.rho_max)

    def value(self, rho):
        return self.a * np.exp(self.clamp(rho) / self.c) + self.b

    def derivative(self, rho):
        return (self.a / self.c) * np.exp(self.clamp(rho) / self.c)

    @property
    def value_range(self):
        """``(upsilon(-rho_max), upsilon(rho_max))``."""
        return float(self.value(-self.rho_max)), float(self.value(self.rho_max))

    def inverse(self, upsilon):
        """``rho`` with ``upsilon(rho) = upsilon``, clamped to ``[-rho_max, rho_max]``."""
        lo, hi = self.value_range
        v = np.clip(np.asarray(upsilon, dtype=float), lo, hi)
        with np.errstate(divide="ignore"):
            rho = self.c * np.log((v - self.b) / self.a)
        return self.clamp(np.where(np.isfinite(rho), rho, -self.rho_max))


def scaling_eval(scaling: ScalingFunction, rho):
    """Return ``(upsilon(rho), d upsilon / d rho)``."""
    e = np.exp(scaling.clamp(rho) / scaling.c)
    return scaling.a * e + scaling.b, (scaling.a / scaling.c) * e


@dataclass
class AdaptState:
    theta_hat: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, dtype=float)
        if not np.all(np.isfinite(self.theta_hat)) or not np.all(np.isfinite(self.rho)):
            raise NumericError("adaptation state must be finite")


@dataclass(frozen=True)
class AdaptGains:
    gamma: np.ndarray
    eta: float

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if g.shape[0] != g.shape[1]:
            raise ConfigurationError("Gamma must be square")
        if not np.allclose(g, g.T, atol=1e-12):
            raise ConfigurationError("Gamma must be symmetric")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigurationError("eta must be positive and finite")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def diagonal(cls, diag, eta: float) -> "AdaptGains":
        return cls(np.diag(np.asarray(diag, dtype=float)), eta)

    def check_positive_definite(self):
        if np.linalg.eigvalsh(self.gamma).min() <= 0:
            raise ConfigurationError("Gamma must be positive definite")


@dataclass(frozen=True)
class UclfFamily:
    """``V_theta(x) = 0.5 |z|^2`` from a transform and its two Jacobians.

    ``decrement_rate`` is the constant ``c`` of the required decrement
    ``Q_theta = c V_theta``.
    """

    transform: Callable
    jac_x: Callable
    jac_theta: Callable
    decrement_rate: float
    name: str = "uclf"

    def __post_init__(self):
        if not self.decrement_rate > 0:
            raise ConfigurationError("decrement_rate must be positive")


class UclfEval(NamedTuple):
    V: np.ndarray
    dV_dx: np.ndarray
    dV_dtheta: np.ndarray


def uclf_value_and_grads(uclf: UclfFamily, x, theta_hat) -> UclfEval:
    z = uclf.transform(x, theta_hat)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite transform output from {uclf.name}")
    V = 0.5 * np.einsum("...i,...i->...", z, z)
    dV_dx = np.einsum("...i,...ij->...j", z, uclf.jac_x(x, theta_hat))
    dV_dtheta = np.einsum("...i,...ij->...j", z, uclf.jac_theta(x, theta_hat))
    return UclfEval(V, dV_dx, dV_dtheta)


# ---------------------------------------------------------------------------
# Backstepping family for the strict-feedback example.
#
# Shorthand used below:
#   s = th2 x1^2 - x2 + th1 sin x1      (= -xdot_1 under theta)
#   g = 2 th2 x1 - 2 + th1 cos x1
# "derived" is the transform produced by stepping through the recursion with
# gains giving zdot_1 = -2 z1 + z2, zdot_2 = -z1 - 2 z2 + z3,
# zdot_3 = -z2 - 2 z3, hence Vdot = -4 V.  "printed" reproduces the published
# expressions character for character, which do not satisfy that identity.

BACKSTEPPING_VARIANTS = ("derived", "printed")


def _bs_parts(x, theta):
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    th1, th2 = theta[..., 0], theta[..., 1]
    sn, cs = np.sin(x1), np.cos(x1)
    s = th2 * x1 * x1 - x2 + th1 * sn
    g = 2.0 * th2 * x1 - 2.0 + th1 * cs
    return x1, x2, x3, th1, th2, sn, cs, s, g


def _check_variant(variant):
    if variant not in BACKSTEPPING_VARIANTS:
        raise ConfigurationError(f"unknown backstepping variant {variant!r}")


def backstepping_transform(x, theta, variant: str = "derived") -> np.ndarray:
    _check_variant(variant)
    x1, x2, x3, th1, th2, sn, cs, s, g = _bs_parts(x, theta)
    z1 = x1
    z2 = x2 + 2.0 * x1 - th2 * x1 * x1 - th1 * sn
    if variant == "derived":
        z3 = x1 + x3 + 2.0 * (x2 + 2.0 * x1 - th2 * x1 * x1 - th1 * sn) + s * g
    else:
        z3 = x1 + x3 + 2.0 * (-th2 * x2 * x2 + x2 + x1 - th1 * sn) + s * g
    return np.stack(np.broadcast_arrays(z1, z2, z3), axis=-1)


def backstepping_jac_x(x, theta, variant: str = "derived") -> np.ndarray:
    _check_variant(variant)
    x1, x2, x3, th1, th2, sn, cs, s, g = _bs_parts(x, theta)
    s_x1 = 2.0 * th2 * x1 + th1 * cs
    g_x1 = 2.0 * th2 - th1 * sn
    shape = np.broadcast(x1, th1).shape
    J = np.zeros(shape + (3, 3))
    J[..., 0, 0] = 1.0
    J[..., 1, 0] = -g
    J[..., 1, 1] = 1.0
    if variant == "derived":
        J[..., 2, 0] = 1.0 - 2.0 * g + s_x1 * g + s * g_x1
        J[..., 2, 1] = 2.0 - g
    else:
        J[..., 2, 0] = 1.0 + 2.0 * (1.0 - th1 * cs) + s_x1 * g + s * g_x1
        J[..., 2, 1] = 2.0 * (1.0 - 2.0 * th2 * x2) - g
    J[..., 2, 2] = 1.0
    return J


def backstepping_jac_theta(x, theta, variant: str = "derived") -> np.ndarray:
    _check_variant(variant)
    x1, x2, x3, th1, th2, sn, cs, s, g = _bs_parts(x, theta)
    shape = np.broadcast(x1, th1).shape
    J = np.zeros(shape + (3, 2))
    J[..., 1, 0] = -sn
    J[..., 1, 1] = -x1 * x1
    J[..., 2, 0] = -2.0 * sn + sn * g + s * cs
    if variant == "derived":
        J[..., 2, 1] = -2.0 * x1 * x1 + x1 * x1 * g + 2.0 * x1 * s
    else:
        J[..., 2, 1] = -2.0 * x2 * x2 + x1 * x1 * g + 2.0 * x1 * s
    return J


def backstepping_uclf(variant: str = "derived") -> UclfFamily:
    _check_variant(variant)
    return UclfFamily(
        transform=lambda x, th: backstepping_transform(x, th, variant),
        jac_x=lambda x, th: backstepping_jac_x(x, th, variant),
        jac_theta=lambda x, th: backstepping_jac_theta(x, th, variant),
        decrement_rate=4.0,
        name=f"backstepping-{variant}",
    )


def identity_uclf(decrement_rate: float = 1.0, p: int = 1) -> UclfFamily:
    """``z = x``; handy for toy problems and tests."""

    def jac_x(x, th):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()

    def jac_theta(x, th):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (p,))

    return UclfFamily(lambda x, th: np.asarray(x, dtype=float), jac_x, jac_theta, decrement_rate, "identity")


# ---------------------------------------------------------------------------
# Adaptation law shared by both certificate types.

def project_rate(theta_hat, theta_hat_dot, box: ParameterBox, tol: float = 1e-9) -> np.ndarray:
    """Zero every rate component that would push ``theta_hat`` out of ``box``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    rate = np.array(theta_hat_dot, dtype=float)
    if np.any(theta_hat < box.lower - tol) or np.any(theta_hat > box.upper + tol):
        raise InvariantViolation(f"estimate {theta_hat} left the parameter box")
    outward = ((theta_hat >= box.upper) & (rate > 0)) | ((theta_hat <= box.lower) & (rate < 0))
    rate[outward] = 0.0
    return rate


def rate_scaling_rhs(scaling: ScalingFunction, rho, certificate, dcert_dtheta, theta_hat_dot, eta: float):
    """``rhodot = -(upsilon / upsilon_rho) (1 / (V + eta)) sum_i dV/dtheta_i thetadot_i``."""
    v, v_rho = scaling_eval(scaling, rho)
    if np.any(v_rho <= 0):
        raise InvariantViolation("scaling function is not strictly increasing at the current rho")
    drift = np.einsum("...i,...i->...", dcert_dtheta, theta_hat_dot)
    return -(v / v_rho) * drift / (certificate + eta)


def upsilon_rate(upsilon, certificate, dcert_dtheta, theta_hat_dot, eta: float):
    """``d upsilon / dt = upsilon_rho * rhodot = -upsilon (1 / (V + eta)) sum_i dV/dtheta_i thetadot_i``.

    Same law as :func:`rate_scaling_rhs` written in ``upsilon`` instead of
    ``rho``.  It stays well conditioned where ``upsilon_rho`` is tiny, which is
    where ``rho`` itself runs off to ``-inf``.
    """
    drift = np.einsum("...i,...i->...", dcert_dtheta, theta_hat_dot)
    return -np.asarray(upsilon) * drift / (certificate + eta)


def estimate_rate_uclf(model: SystemModel, gains: AdaptGains, upsilon, x, dV_dx, theta_hat=None,
                       t: float = 0.0, box: Optional[ParameterBox] = None):
    """``-upsilon Gamma Delta(x) dV/dx^T``, projected onto ``box`` when given."""
    delta = model.regressor(x, t)
    rate = -np.asarray(upsilon)[..., None] * np.einsum("ij,...jn,...n->...i", gains.gamma, delta, dV_dx)
    if box is not None:
        rate = project_rate(theta_hat, rate, box)
    return rate


def adapt_rhs_uclf(model: SystemModel, uclf: UclfFamily, scaling: ScalingFunction, gains: AdaptGains,
                   x, state: AdaptState, t: float = 0.0, box: Optional[ParameterBox] = None,
                   evaluated: Optional[UclfEval] = None):
    """Return ``(theta_hat_dot, rho_dot)``.

    With ``box`` given, the estimate rate is projected first and the rho rate
    is computed from the projected value, so the cancellation still holds.
    """
    theta_hat = np.asarray(state.theta_hat, dtype=float)
    ev = evaluated if evaluated is not None else uclf_value_and_grads(uclf, x, theta_hat)
    theta_hat_dot = estimate_rate_uclf(model, gains, scaling.value(state.rho), x, ev.dV_dx, theta_hat, t, box)
    rho_dot = rate_scaling_rhs(scaling, state.rho, ev.V, ev.dV_dtheta, theta_hat_dot, gains.eta)
    return theta_hat_dot, rho_dot


def composite_lyapunov(uclf: UclfFamily, scaling: ScalingFunction, gains: AdaptGains, x,
                       state: AdaptState, theta_true, t: float = 0.0, certificate=None):
    """``upsilon(rho) (V + eta) + 0.5 err^T Gamma^{-1} err`` with ``err = theta_hat - theta``.

    Diagnostic only, since it reads the true parameter.  ``certificate`` lets
    the caller pass an already computed ``V`` (or a Riemannian energy).
    """
    try:
        gamma_inv = np.linalg.inv(gains.gamma)
    except np.linalg.LinAlgError:
        raise ConfigurationError("Gamma is singular") from None
    if certificate is None:
        certificate = uclf_value_and_grads(uclf, x, state.theta_hat).V
    err = np.asarray(state.theta_hat, dtype=float) - np.asarray(theta_true, dtype=float)
    return (scaling.value(state.rho) * (certificate + gains.eta)
            + 0.5 * np.einsum("...i,ij,...j->...", err, gamma_inv, err))
