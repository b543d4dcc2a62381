"""Discretized minimum-energy curves between a reference point and the state.

The curve is sampled at ``s_k = k / N`` and its energy approximated by

    E = N * sum_k D_k^T Mbar_k D_k,   D_k = gamma_{k+1} - gamma_k,
    Mbar_k = (M(gamma_k) + M(gamma_{k+1})) / 2

(trapezoidal rule on each segment with the segment's constant velocity
``N D_k``).  Interior nodes are optimized with a preconditioned descent whose
preconditioner is the exact Hessian for a frozen metric, plus an Armijo
backtracking line search, so every accepted iterate lowers the energy.

The *endpoint covectors* are half the gradient of the discrete energy with
respect to the two fixed endpoints: ``end_covector = dE/dx / 2`` and
``start_covector = -dE/dx_d / 2``.  In the continuum limit they equal
``M(x) gamma_s(1)`` and ``M(x_d) gamma_s(0)``; using the discrete versions
keeps ``dE/dt = dE/dx xdot + dE/dx_d xdot_d + dE/dtheta thetadot`` exact at a
discrete minimizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DegeneracyError, PreconditionError
from .metric import MetricFamily

DEFAULT_SEGMENTS = 20


@dataclass
class Geodesic:
    nodes: np.ndarray
    speeds: np.ndarray
    energy: float
    converged: bool
    residual: float
    iterations: int = 0
    start_covector: np.ndarray = None
    end_covector: np.ndarray = None
    energy_dt: float = 0.0
    energy_history: list = field(default_factory=list)

    @property
    def n_segments(self) -> int:
        return self.nodes.shape[0] - 1

    def speed_profile(self, metric: MetricFamily, theta_hat, t: float = 0.0) -> np.ndarray:
        """``gamma_s^T M gamma_s`` at every node."""
        M = metric.metric(self.nodes, theta_hat, t)
        return np.einsum("ki,kij,kj->k", self.speeds, M, self.speeds)

    def speed_deviation(self, metric: MetricFamily, theta_hat, t: float = 0.0) -> float:
        """Relative standard deviation of the node speed profile (0 for a constant-speed curve)."""
        prof = self.speed_profile(metric, theta_hat, t)
        mean = prof.mean()
        return 0.0 if mean <= 0 else float(prof.std() / mean)


def node_speeds(nodes: np.ndarray) -> np.ndarray:
    """Second-order finite-difference ``d gamma / ds`` at every node."""
    N = nodes.shape[0] - 1
    sp = np.empty_like(nodes)
    if N == 1:
        sp[:] = nodes[1] - nodes[0]
        return sp
    sp[1:-1] = (nodes[2:] - nodes[:-2]) * (N / 2.0)
    sp[0] = (-3.0 * nodes[0] + 4.0 * nodes[1] - nodes[2]) * (N / 2.0)
    sp[-1] = (3.0 * nodes[-1] - 4.0 * nodes[-2] + nodes[-3]) * (N / 2.0)
    return sp


def _metric_at(metric: MetricFamily, nodes, theta, t, with_dx=True):
    W = metric.dual(nodes, theta, t)
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise DegeneracyError("metric is not positive definite along the curve") from None
    M = np.linalg.inv(W)
    if not with_dx:
        return M, None
    dW = metric.d_dual_dx(nodes, theta, t)
    dM = -np.einsum("kij,kcjl,klm->kcim", M, dW, M)
    return M, dM


def curve_energy(metric: MetricFamily, nodes, theta, t: float = 0.0) -> float:
    """Discrete energy of an arbitrary sampled curve."""
    M, _ = _metric_at(metric, nodes, theta, t, with_dx=False)
    return _energy_from(M, nodes)


def _energy_from(M, nodes):
    N = nodes.shape[0] - 1
    D = np.diff(nodes, axis=0)
    Mbar = 0.5 * (M[:-1] + M[1:])
    return float(N * np.einsum("ki,kij,kj->", D, Mbar, D))


def _energy_and_grad(M, dM, nodes):
    """Energy and gradient with respect to every node, shape ``(N + 1, n)``."""
    N = nodes.shape[0] - 1
    D = np.diff(nodes, axis=0)
    Mbar = 0.5 * (M[:-1] + M[1:])
    MD = np.einsum("kij,kj->ki", Mbar, D)
    E = float(N * np.einsum("ki,ki->", D, MD))
    G = np.zeros_like(nodes)
    G[1:] += 2.0 * N * MD
    G[:-1] -= 2.0 * N * MD
    # metric variation: each node appears with weight 1/2 in its two segments
    G[1:] += 0.5 * N * np.einsum("ki,kcij,kj->kc", D, dM[1:], D)
    G[:-1] += 0.5 * N * np.einsum("ki,kcij,kj->kc", D, dM[:-1], D)
    return E, G, Mbar


def _frozen_hessian(Mbar):
    N, n = Mbar.shape[0], Mbar.shape[1]
    size = (N - 1) * n
    H = np.zeros((size, size))
    for j in range(N - 1):
        sl = slice(j * n, (j + 1) * n)
        H[sl, sl] = 2.0 * N * (Mbar[j] + Mbar[j + 1])
        if j + 1 < N - 1:
            nx = slice((j + 1) * n, (j + 2) * n)
            H[sl, nx] = -2.0 * N * Mbar[j + 1]
            H[nx, sl] = -2.0 * N * Mbar[j + 1]
    return H


def _straight(x_d, x, N):
    s = np.linspace(0.0, 1.0, N + 1)[:, None]
    return (1.0 - s) * x_d + s * x


def solve_geodesic(metric: MetricFamily, theta_hat, x_d, x, t: float = 0.0,
                   warm_start: Optional[Geodesic] = None, n_segments: int = DEFAULT_SEGMENTS,
                   max_iters: int = 200, grad_tol: float = 1e-8, rel_tol: float = 1e-12) -> Geodesic:
    """Minimize the discrete energy over interior nodes with fixed endpoints.

    Stops when the interior gradient norm is at most ``grad_tol`` or the
    relative energy decrease of an iteration falls below ``rel_tol``.  After
    ``max_iters`` the best iterate is returned with ``converged=False``.
    """
    x_d = np.asarray(x_d, dtype=float)
    x = np.asarray(x, dtype=float)
    N = int(n_segments)
    if N < 2:
        raise ValueError("need at least two segments")
    theta_hat = np.asarray(theta_hat, dtype=float)

    nodes = _straight(x_d, x, N)
    if np.array_equal(x, x_d):
        nodes = np.broadcast_to(x, nodes.shape).copy()
        n = x.size
        zero = np.zeros(n)
        return Geodesic(nodes, np.zeros_like(nodes), 0.0, True, 0.0, 0, zero, zero.copy(), 0.0, [0.0])

    if warm_start is not None and warm_start.nodes.shape == nodes.shape:
        s = np.linspace(0.0, 1.0, N + 1)[:, None]
        shifted = warm_start.nodes + (1.0 - s) * (x_d - warm_start.nodes[0]) + s * (x - warm_start.nodes[-1])
        Ms, _ = _metric_at(metric, nodes, theta_hat, t, with_dx=False)
        try:
            M0, _ = _metric_at(metric, shifted, theta_hat, t, with_dx=False)
            if _energy_from(M0, shifted) < _energy_from(Ms, nodes):
                nodes = shifted
        except DegeneracyError:
            pass

    M, dM = _metric_at(metric, nodes, theta_hat, t)
    E, G, Mbar = _energy_and_grad(M, dM, nodes)
    history = [E]
    converged = False
    it = 0
    gnorm = float(np.linalg.norm(G[1:-1]))
    while it < max_iters:
        if gnorm <= grad_tol:
            converged = True
            break
        it += 1
        g = G[1:-1].ravel()
        H = _frozen_hessian(Mbar)
        d = -np.linalg.solve(H, g)
        slope = float(g @ d)
        if slope >= 0:
            d, slope = -g, -float(g @ g)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            trial = nodes.copy()
            trial[1:-1] += alpha * d.reshape(N - 1, -1)
            try:
                Mt, _ = _metric_at(metric, trial, theta_hat, t, with_dx=False)
            except DegeneracyError:
                # step left the region where the metric is defined; backtrack
                alpha *= 0.5
                continue
            Et = _energy_from(Mt, trial)
            if Et <= E + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted or Et >= E:
            # no representable decrease left
            converged = True
            break
        rel = (E - Et) / max(E, 1e-300)
        nodes = trial
        M, dM = _metric_at(metric, nodes, theta_hat, t)
        E, G, Mbar = _energy_and_grad(M, dM, nodes)
        history.append(E)
        gnorm = float(np.linalg.norm(G[1:-1]))
        if rel < rel_tol:
            converged = True
            break
    if not converged and gnorm <= grad_tol:
        converged = True

    e_dt = 0.0
    if getattr(metric, "time_varying", False):
        dMt = metric.d_metric_dt(nodes, theta_hat, t)
        e_dt = _segment_quadratic(nodes, dMt[:, None])[0]
    return Geodesic(nodes=nodes, speeds=node_speeds(nodes), energy=E, converged=converged, residual=gnorm,
                    iterations=it, start_covector=-0.5 * G[0], end_covector=0.5 * G[-1],
                    energy_dt=float(e_dt), energy_history=history)


def _segment_quadratic(nodes, dmats):
    """``N sum_k D_k^T avg(dmats)_k D_k`` for each stacked matrix; ``dmats`` is ``(N+1, c, n, n)``."""
    N = nodes.shape[0] - 1
    D = np.diff(nodes, axis=0)
    avg = 0.5 * (dmats[:-1] + dmats[1:])
    return N * np.einsum("ki,kcij,kj->c", D, avg, D)


def energy_param_grad(metric: MetricFamily, geodesic: Geodesic, theta_hat, t: float = 0.0,
                      require_converged: bool = True) -> np.ndarray:
    """``dE/dtheta_hat`` with the curve held fixed.

    At a minimizer first-order node variations do not change the energy, so
    differentiating only the metric is exact for the discrete problem.
    """
    if require_converged and not geodesic.converged:
        raise PreconditionError("energy gradient requested on an unconverged geodesic")
    dMth = metric.d_metric_dtheta(geodesic.nodes, theta_hat, t)
    return _segment_quadratic(geodesic.nodes, dMth)
