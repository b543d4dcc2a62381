"""Linearly parameterized uncertain dynamics.

A model describes

    xdot = f(x, t) - Delta(x, t)^T theta + B(x, t) u

where the rows of ``Delta`` (shape ``p x n``) are the regressor vector fields
``phi_i`` and the columns of ``B`` (shape ``n x m``) are the input fields
``b_i``.  The minus sign in front of the uncertainty belongs to
:func:`eval_dynamics`; regressors are stored exactly as they appear in the
row decomposition, never pre-negated.

Every callable accepts states with arbitrary leading batch axes, i.e. ``x`` of
shape ``(..., n)``, and returns correspondingly batched arrays.  That lets one
call advance a whole Monte Carlo batch or evaluate a field at every node of a
discretized curve.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericError

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SystemModel:
    """Uncertain control-affine dynamics with analytic state Jacobians.

    ``jac_phi`` returns the stacked Jacobians of the regressor rows with shape
    ``(..., p, n, n)`` (entry ``[i, j, k] = d phi_i[j] / d x_k``); ``jac_b``
    likewise returns ``(..., m, n, n)`` for the input columns.
    """

    n: int
    m: int
    p: int
    f: Field
    regressor: Field
    input_matrix: Field
    jac_f: Optional[Field] = None
    jac_phi: Optional[Field] = None
    jac_b: Optional[Field] = None
    name: str = "custom"

    def __post_init__(self):
        for attr in ("n", "m", "p"):
            if int(getattr(self, attr)) < 0:
                raise ConfigurationError(f"{attr} must be non-negative")
        if self.m > self.n:
            raise ConfigurationError("input dimension m exceeds state dimension n")


@dataclass(frozen=True)
class ParameterBox:
    """Axis-aligned parameter set ``lower <= theta <= upper``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("box bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ConfigurationError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower - tol) and np.all(theta <= self.upper + tol))

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lower, self.upper, size=shape)

    def grid(self, points_per_axis: int) -> np.ndarray:
        """Tensor grid with ``points_per_axis`` nodes per dimension, shape ``(k, dim)``."""
        axes = [np.linspace(lo, hi, points_per_axis) if points_per_axis > 1 else np.array([0.5 * (lo + hi)])
                for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)


def _check_last(arr: np.ndarray, size: int, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != size:
        raise ConfigurationError(f"{what} has trailing dimension {arr.shape[-1:] or '()'}, expected {size}")
    return arr


def uncertainty_term(model: SystemModel, x, theta, t: float = 0.0) -> np.ndarray:
    """Return ``Delta(x, t)^T theta`` (without the leading minus sign)."""
    delta = model.regressor(x, t)
    return np.einsum("...pn,...p->...n", delta, theta)


def input_term(model: SystemModel, x, u, t: float = 0.0) -> np.ndarray:
    return np.einsum("...nm,...m->...n", model.input_matrix(x, t), u)


def eval_dynamics(model: SystemModel, x, theta, u, t: float = 0.0) -> np.ndarray:
    """Evaluate ``f(x,t) - Delta(x,t)^T theta + B(x,t) u``."""
    x = _check_last(x, model.n, "state x")
    theta = _check_last(theta, model.p, "parameter theta")
    u = _check_last(u, model.m, "input u")
    xdot = model.f(x, t) - uncertainty_term(model, x, theta, t) + input_term(model, x, u, t)
    bad = ~np.isfinite(xdot)
    if np.any(bad):
        comps = sorted({int(i) for i in np.nonzero(bad)[-1]})
        raise NumericError(f"non-finite dynamics in component(s) {comps} of {model.name}")
    return xdot


def closed_loop_jacobian(model: SystemModel, x, theta, u, t: float = 0.0) -> np.ndarray:
    """State Jacobian of the dynamics at fixed ``(theta, u)``.

    ``A = df/dx - sum_i theta_i dphi_i/dx + sum_i u_i db_i/dx``.
    """
    if model.jac_f is None or model.jac_phi is None or model.jac_b is None:
        raise ConfigurationError(f"model {model.name!r} does not provide all Jacobians")
    x = _check_last(x, model.n, "state x")
    theta = _check_last(theta, model.p, "parameter theta")
    u = _check_last(u, model.m, "input u")
    return (model.jac_f(x, t)
            - np.einsum("...p,...pij->...ij", theta, model.jac_phi(x, t))
            + np.einsum("...m,...mij->...ij", u, model.jac_b(x, t)))


# ---------------------------------------------------------------------------
# Shipped example systems.  Both share the constant input column (0, 0, 1).

def _const_b(x, t):
    x = np.asarray(x)
    out = np.zeros(x.shape[:-1] + (3, 1))
    out[..., 2, 0] = 1.0
    return out


def _zero_jac_b(x, t):
    x = np.asarray(x)
    return np.zeros(x.shape[:-1] + (1, 3, 3))


def _ex1_f(x, t):
    out = np.zeros_like(x)
    out[..., 0] = x[..., 1]
    out[..., 1] = x[..., 2]
    return out


def _ex1_regressor(x, t):
    x1 = x[..., 0]
    out = np.zeros(x.shape[:-1] + (2, 3))
    out[..., 0, 0] = np.sin(x1)
    out[..., 1, 0] = x1 * x1
    return out


def _ex1_jac_f(x, t):
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 1] = 1.0
    out[..., 1, 2] = 1.0
    return out


def _ex1_jac_phi(x, t):
    x1 = x[..., 0]
    out = np.zeros(x.shape[:-1] + (2, 3, 3))
    out[..., 0, 0, 0] = np.cos(x1)
    out[..., 1, 0, 0] = 2.0 * x1
    return out


def _ex2_f(x, t):
    out = np.empty_like(x)
    out[..., 0] = x[..., 2]
    out[..., 1] = -x[..., 1]
    out[..., 2] = np.tanh(x[..., 1])
    return out


def _ex2_regressor(x, t):
    # phi_1 = (x1, 0, 0), phi_2 = (0, x1^2, 0), phi_3 = (0, 0, x3), phi_4 = (0, 0, x1^2)
    x1, x3 = x[..., 0], x[..., 2]
    out = np.zeros(x.shape[:-1] + (4, 3))
    out[..., 0, 0] = x1
    out[..., 1, 1] = x1 * x1
    out[..., 2, 2] = x3
    out[..., 3, 2] = x1 * x1
    return out


def _ex2_jac_f(x, t):
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 2] = 1.0
    out[..., 1, 1] = -1.0
    out[..., 2, 1] = 1.0 / np.cosh(x[..., 1]) ** 2
    return out


def _ex2_jac_phi(x, t):
    x1 = x[..., 0]
    out = np.zeros(x.shape[:-1] + (4, 3, 3))
    out[..., 0, 0, 0] = 1.0
    out[..., 1, 1, 0] = 2.0 * x1
    out[..., 2, 2, 2] = 1.0
    out[..., 3, 2, 0] = 2.0 * x1
    return out


STRICT_FEEDBACK = SystemModel(
    n=3, m=1, p=2, f=_ex1_f, regressor=_ex1_regressor, input_matrix=_const_b,
    jac_f=_ex1_jac_f, jac_phi=_ex1_jac_phi, jac_b=_zero_jac_b, name="ex1-strict-feedback",
)

CONTRACTING = SystemModel(
    n=3, m=1, p=4, f=_ex2_f, regressor=_ex2_regressor, input_matrix=_const_b,
    jac_f=_ex2_jac_f, jac_phi=_ex2_jac_phi, jac_b=_zero_jac_b, name="ex2-contracting",
)

MODEL_NAMES = {
    "ex1-strict-feedback": STRICT_FEEDBACK,
    "ex2-contracting": CONTRACTING,
}


def builtin_models() -> dict:
    return {"strict_feedback": STRICT_FEEDBACK, "contracting": CONTRACTING}


def get_model(name: str) -> SystemModel:
    try:
        return MODEL_NAMES[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODEL_NAMES)}") from None
