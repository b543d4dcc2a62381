"""Parameter-dependent Riemannian metrics.

Metrics are stored through their dual ``W = M^{-1}`` because the contraction
conditions are linear in ``W``.  All maps take ``x`` of shape ``(..., n)`` and
``theta`` of shape ``(p,)`` or ``(..., p)``.  Derivative maps stack the
partials on the axis right before the matrix axes:
``d_dual_dx(x, theta, t)[..., k, :, :] = dW/dx_k``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError


def _zeros_dt(x, theta, t):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    return np.zeros(x.shape[:-1] + (n, n))


@dataclass(frozen=True)
class MetricFamily:
    dual: Callable
    d_dual_dx: Callable
    d_dual_dtheta: Callable
    lam: float
    uniform_bounds: tuple = (0.0, np.inf)
    d_dual_dt: Callable = _zeros_dt
    name: str = "metric"
    time_varying: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("contraction rate lambda must be positive")

    @classmethod
    def from_metric(cls, metric, d_metric_dx, d_metric_dtheta, lam, uniform_bounds=(0.0, np.inf),
                    name="metric") -> "MetricFamily":
        """Build a family from primal maps ``M``, ``dM/dx``, ``dM/dtheta``."""

        def dual(x, th, t=0.0):
            return np.linalg.inv(metric(x, th, t))

        def _dual_partial(dmap):
            def d(x, th, t=0.0):
                W = np.linalg.inv(metric(x, th, t))
                return -np.einsum("...ij,...kjl,...lm->...kim", W, dmap(x, th, t), W)
            return d

        return cls(dual, _dual_partial(d_metric_dx), _dual_partial(d_metric_dtheta), lam,
                   uniform_bounds, name=name)

    def metric(self, x, theta, t=0.0):
        return np.linalg.inv(self.dual(x, theta, t))

    def _primal_partial(self, W, dW):
        M = np.linalg.inv(W)
        return M, -np.einsum("...ij,...kjl,...lm->...kim", M, dW, M)

    def metric_and_dx(self, x, theta, t=0.0):
        return self._primal_partial(self.dual(x, theta, t), self.d_dual_dx(x, theta, t))

    def d_metric_dx(self, x, theta, t=0.0):
        return self.metric_and_dx(x, theta, t)[1]

    def d_metric_dtheta(self, x, theta, t=0.0):
        return self._primal_partial(self.dual(x, theta, t), self.d_dual_dtheta(x, theta, t))[1]

    def d_metric_dt(self, x, theta, t=0.0):
        W = self.dual(x, theta, t)
        M, dM = self._primal_partial(W, self.d_dual_dt(x, theta, t)[..., None, :, :])
        return dM[..., 0, :, :]


def constant_metric(M, lam: float = 0.5, p: int = 1) -> MetricFamily:
    """State- and parameter-independent metric ``M``."""
    M = np.asarray(M, dtype=float)
    W = np.linalg.inv(M)
    n = M.shape[0]
    eig = np.linalg.eigvalsh(M)

    def dual(x, th, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(W, x.shape[:-1] + (n, n)).copy()

    def ddx(x, th, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n, n))

    def ddth(x, th, t=0.0):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (p, n, n))

    return MetricFamily(dual, ddx, ddth, lam, (float(eig.min()), float(eig.max())), name="constant")


# ---------------------------------------------------------------------------

def monomial_exponents(n_vars: int, degree: int, active: Optional[Sequence[int]] = None,
                       group_limits: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """All exponent tuples of total degree ``<= degree`` over the ``active`` variables.

    ``group_limits`` is a list of ``(indices, max_degree)`` pairs capping the
    partial degree within a group of variables.
    """
    active = list(range(n_vars)) if active is None else sorted(set(active))
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(active, total):
            e = np.zeros(n_vars, dtype=int)
            for v in combo:
                e[v] += 1
            if group_limits and any(e[list(idx)].sum() > lim for idx, lim in group_limits):
                continue
            out.append(e)
    return np.array(out, dtype=int).reshape(-1, n_vars)


def _upper_indices(n):
    return np.triu_indices(n)


@dataclass(frozen=True)
class PolynomialMetric:
    """Dual metric whose upper-triangle entries are polynomials in ``(x, theta)``.

    ``exponents`` has shape ``(K, n + p)`` (state variables first) and
    ``coeffs`` shape ``(K, n (n + 1) / 2)`` with columns ordered like
    ``numpy.triu_indices(n)``.
    """

    n: int
    p: int
    degree: int
    exponents: np.ndarray
    coeffs: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        E = np.asarray(self.exponents, dtype=int)
        C = np.asarray(self.coeffs, dtype=float)
        nu = self.n * (self.n + 1) // 2
        if E.ndim != 2 or E.shape[1] != self.n + self.p:
            raise ConfigurationError(f"exponent table must have {self.n + self.p} columns")
        if C.shape != (E.shape[0], nu):
            raise ConfigurationError(f"coefficient table must have shape {(E.shape[0], nu)}, got {C.shape}")
        if np.any(E < 0) or (E.size and E.sum(axis=1).max() > self.degree):
            raise ConfigurationError("monomial exceeds declared degree")
        object.__setattr__(self, "exponents", E)
        object.__setattr__(self, "coeffs", C)

    @classmethod
    def template(cls, n: int, p: int, degree: int, state_vars=None, theta_vars=None,
                 theta_degree: Optional[int] = None, scale: float = 1.0) -> "PolynomialMetric":
        """Template with ``W = scale * I`` and room for every allowed monomial."""
        state_vars = list(range(n)) if state_vars is None else list(state_vars)
        theta_vars = list(range(p)) if theta_vars is None else list(theta_vars)
        active = state_vars + [n + i for i in theta_vars]
        limits = [(list(range(n, n + p)), theta_degree)] if theta_degree is not None else None
        E = monomial_exponents(n + p, degree, active, limits)
        C = np.zeros((E.shape[0], n * (n + 1) // 2))
        iu = _upper_indices(n)
        C[0, iu[0] == iu[1]] = scale
        return cls(n, p, degree, E, C)

    def with_coeffs(self, coeffs) -> "PolynomialMetric":
        return PolynomialMetric(self.n, self.p, self.degree, self.exponents, np.asarray(coeffs, float), dict(self.meta))

    @property
    def n_vars(self):
        return self.n + self.p

    def _vars(self, x, theta):
        x = np.asarray(x, dtype=float)
        theta = np.asarray(theta, dtype=float)
        theta = np.broadcast_to(theta, x.shape[:-1] + (self.p,))
        return np.concatenate([x, theta], axis=-1)

    def _powers(self, z):
        # pw[..., j, k] = z_j ** k
        return z[..., :, None] ** np.arange(self.degree + 1)

    def monomials(self, z):
        pw = self._powers(z)
        cols = np.arange(self.n_vars)
        return np.prod(pw[..., cols, self.exponents], axis=-1)

    def monomial_partials(self, z, var_indices):
        """``d monomial / d z_j`` for ``j`` in ``var_indices``; shape ``(..., len(var_indices), K)``."""
        pw = self._powers(z)
        cols = np.arange(self.n_vars)
        out = []
        for j in var_indices:
            e = self.exponents.copy()
            factor = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            out.append(factor * np.prod(pw[..., cols, e], axis=-1))
        return np.stack(out, axis=-2)

    def _assemble(self, upper):
        n = self.n
        iu = _upper_indices(n)
        W = np.zeros(upper.shape[:-1] + (n, n))
        W[..., iu[0], iu[1]] = upper
        W[..., iu[1], iu[0]] = upper
        return W

    def dual(self, x, theta, t=0.0):
        return self._assemble(self.monomials(self._vars(x, theta)) @ self.coeffs)

    def d_dual_dx(self, x, theta, t=0.0):
        d = self.monomial_partials(self._vars(x, theta), range(self.n))
        return self._assemble(d @ self.coeffs)

    def d_dual_dtheta(self, x, theta, t=0.0):
        d = self.monomial_partials(self._vars(x, theta), range(self.n, self.n + self.p))
        return self._assemble(d @ self.coeffs)

    def basis_duals(self, x, theta):
        """``W`` for each unit coefficient: shape ``(..., K * nu, n, n)`` (linear map from coeffs)."""
        mono = self.monomials(self._vars(x, theta))
        return self._unit_assemble(mono)

    def basis_d_dual_dx(self, x, theta):
        d = self.monomial_partials(self._vars(x, theta), range(self.n))  # (..., n, K)
        return self._unit_assemble(d)

    def _unit_assemble(self, vals):
        n = self.n
        iu = _upper_indices(n)
        nu = iu[0].size
        K = self.exponents.shape[0]
        out = np.zeros(vals.shape[:-1] + (K, nu, n, n))
        for c in range(nu):
            out[..., c, iu[0][c], iu[1][c]] = vals
            out[..., c, iu[1][c], iu[0][c]] = vals
        return out.reshape(vals.shape[:-1] + (K * nu, n, n))

    def to_family(self, lam: float, uniform_bounds=(0.0, np.inf), name="polynomial") -> MetricFamily:
        return MetricFamily(self.dual, self.d_dual_dx, self.d_dual_dtheta, lam, tuple(uniform_bounds), name=name)

    # -- file format -------------------------------------------------------
    def to_dict(self) -> dict:
        iu = _upper_indices(self.n)
        terms = []
        for k, e in enumerate(self.exponents):
            for c in range(iu[0].size):
                val = float(self.coeffs[k, c])
                if val != 0.0:
                    terms.append({"entry": [int(iu[0][c]), int(iu[1][c])],
                                  "exponents": [int(v) for v in e], "coefficient": val})
        return {"format": "polynomial-dual-metric", "n": self.n, "p": self.p, "degree": self.degree,
                "monomials": [[int(v) for v in e] for e in self.exponents],
                "terms": terms, "meta": self.meta}

    @classmethod
    def from_dict(cls, data: dict) -> "PolynomialMetric":
        try:
            n, p, degree = int(data["n"]), int(data["p"]), int(data["degree"])
            terms = data["terms"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed metric file: {exc}") from None
        monos = [tuple(e) for e in data.get("monomials", [])]
        for term in terms:
            e = tuple(int(v) for v in term["exponents"])
            if e not in monos:
                monos.append(e)
        index = {e: k for k, e in enumerate(monos)}
        iu = _upper_indices(n)
        col = {(int(i), int(j)): c for c, (i, j) in enumerate(zip(*iu))}
        C = np.zeros((len(monos), n * (n + 1) // 2))
        for term in terms:
            i, j = sorted(int(v) for v in term["entry"])
            if (i, j) not in col:
                raise ConfigurationError(f"entry {term['entry']} out of range for n={n}")
            C[index[tuple(int(v) for v in term["exponents"])], col[(i, j)]] += float(term["coefficient"])
        E = np.array(monos, dtype=int).reshape(-1, n + p)
        return cls(n, p, degree, E, C, dict(data.get("meta", {})))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PolynomialMetric":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"metric file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)
