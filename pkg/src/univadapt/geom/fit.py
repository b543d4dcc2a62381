"""Sampled-LMI fitting of polynomial dual metrics.

This replaces sum-of-squares synthesis with a penalty method: the C1 matrix,
the C2 residual and the dual metric itself are all linear in the polynomial
coefficients, so per-sample basis matrices are assembled once and the
coefficients are driven by Adam steps on

    mean_s relu(max_eig(C1_s) + margin)^2 + mean_s |C2_s|^2
        + bound_weight * mean_s [relu(w_lo - min_eig W_s)^2 + relu(max_eig W_s - w_hi)^2]

where ``w_lo = 1 / m_hi`` and ``w_hi = 1 / m_lo``.  The max-eigenvalue terms
use the subgradient ``v^T (dS/dc) v`` of the top eigenvector.  Nothing here
certifies the result off the samples; re-validate on a finer grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import SynthesisError
from ..sysmodel import ParameterBox, SystemModel, closed_loop_jacobian, eval_dynamics
from .certify import annihilator
from .metric import PolynomialMetric

log = logging.getLogger(__name__)


@dataclass
class FitSettings:
    margin: float = 1e-2
    metric_bounds: tuple = (0.02, 50.0)  # (m_lo, m_hi) for M
    bound_weight: float = 10.0
    learning_rate: float = 0.05
    max_iters: int = 4000
    tol: float = 0.0
    seed: int = 0
    max_samples: int = 6000


def _c1_basis(model, template: PolynomialMetric, lam, xs, ths, us, t=0.0):
    """Projected C1 matrices for every unit coefficient: ``(S, J, r, r)``."""
    A = closed_loop_jacobian(model, xs, ths, us, t)
    xdot = eval_dynamics(model, xs, ths, us, t)
    Wb = template.basis_duals(xs, ths)                       # (S, J, n, n)
    dWb = template.basis_d_dual_dx(xs, ths)                  # (S, n*J ... ) see below
    n = template.n
    J = Wb.shape[-3]
    dWb = dWb.reshape(xs.shape[0], n, J, n, n)               # partial index first
    Wdot = np.einsum("skjab,sk->sjab", dWb, xdot)
    WA = np.einsum("sjab,scb->sjac", Wb, A)
    S = WA + np.swapaxes(WA, -1, -2) - Wdot + 2.0 * lam * Wb
    Bp = annihilator(model.input_matrix(xs, t))             # (S, n, r)
    return np.einsum("sar,sjab,sbq->sjrq", Bp, S, Bp), Wb


def _c2_basis(model, template: PolynomialMetric, xs, ths, t=0.0):
    Wb = template.basis_duals(xs, ths)
    n = template.n
    J = Wb.shape[-3]
    dWb = template.basis_d_dual_dx(xs, ths).reshape(xs.shape[0], n, J, n, n)
    Bm = model.input_matrix(xs, t)
    Jb = model.jac_b(xs, t)
    dbW = np.einsum("skjab,skm->smjab", dWb, Bm)
    WJ = np.einsum("sjab,smcb->smjac", Wb, Jb)
    JW = np.einsum("smac,sjcb->smjab", Jb, Wb)
    return dbW - WJ - JW


def fit_metric_coeffs(model: SystemModel, template: PolynomialMetric, lam: float, sample_grid,
                      theta_box: ParameterBox, theta_samples=None, u_samples=None,
                      settings: FitSettings | None = None, extra_pairs=None) -> PolynomialMetric:
    """Fit ``template`` coefficients so C1/C2 hold (with margin) on the samples.

    ``sample_grid`` holds states ``(k, n)``; each is paired with every entry of
    ``theta_samples`` (default: a 3-point-per-axis grid of ``theta_box``).
    Pairs beyond ``settings.max_samples`` are subsampled at random with
    ``settings.seed``.  ``extra_pairs = (xs, thetas)`` are always kept.
    The template's coefficients are the starting point.
    """
    cfg = settings or FitSettings()
    rng = np.random.default_rng(cfg.seed)
    xs0 = np.asarray(sample_grid, dtype=float).reshape(-1, model.n)
    th0 = theta_box.grid(3) if theta_samples is None else np.asarray(theta_samples, float).reshape(-1, model.p)
    xs = np.repeat(xs0, th0.shape[0], axis=0)
    ths = np.tile(th0, (xs0.shape[0], 1))
    if xs.shape[0] > cfg.max_samples:
        keep = np.sort(rng.choice(xs.shape[0], cfg.max_samples, replace=False))
        xs, ths = xs[keep], ths[keep]
    if extra_pairs is not None:
        xs = np.concatenate([xs, np.asarray(extra_pairs[0], float).reshape(-1, model.n)])
        ths = np.concatenate([ths, np.asarray(extra_pairs[1], float).reshape(-1, model.p)])
    us = np.zeros((xs.shape[0], model.m)) if u_samples is None else np.broadcast_to(
        np.asarray(u_samples, float), (xs.shape[0], model.m))

    P1, Wb = _c1_basis(model, template, lam, xs, ths, us)
    P2 = _c2_basis(model, template, xs, ths)
    n_s, J = P1.shape[0], P1.shape[1]
    r, n = P1.shape[-1], Wb.shape[-1]
    # stack (sample, matrix entry) rows so every map and gradient below is one matrix-vector product
    P1f = np.ascontiguousarray(P1.reshape(n_s, J, r * r).transpose(0, 2, 1).reshape(-1, J))
    Wbf = np.ascontiguousarray(Wb.reshape(n_s, J, n * n).transpose(0, 2, 1).reshape(-1, J))
    P2f = np.ascontiguousarray(np.moveaxis(P2, 2, -1).reshape(-1, J))
    w_lo, w_hi = 1.0 / cfg.metric_bounds[1], 1.0 / cfg.metric_bounds[0]

    c = template.coeffs.ravel().copy()
    m1 = np.zeros_like(c)
    m2 = np.zeros_like(c)
    beta1, beta2, eps = 0.9, 0.999, 1e-12
    best = None

    def evaluate(c):
        ev1, vec1 = np.linalg.eigh((P1f @ c).reshape(n_s, r, r))
        evW, vecW = np.linalg.eigh((Wbf @ c).reshape(n_s, n, n))
        R = (P2f @ c).reshape(n_s, -1)
        return ev1[:, -1], vec1[:, :, -1], evW, vecW, R

    def weighted_quad(basis, weights, vecs):
        # sum_s w_s v_s^T (dS_s / dc) v_s
        outer = weights[:, None, None] * vecs[:, :, None] * vecs[:, None, :]
        return outer.reshape(-1) @ basis

    for it in range(cfg.max_iters + 1):
        top, v, evW, vecW, R = evaluate(c)
        viol = np.maximum(top + cfg.margin, 0.0)
        lo_v = np.maximum(w_lo - evW[:, 0], 0.0)
        hi_v = np.maximum(evW[:, -1] - w_hi, 0.0)
        worst = float(top.max())
        bounds_ok = lo_v.max() <= 0 and hi_v.max() <= 0
        c2_worst = float(np.sqrt((R ** 2).sum(axis=1)).max())
        if best is None or (bounds_ok, -max(worst, 0) - c2_worst) > (best[0], -max(best[1], 0) - best[3]):
            best = (bounds_ok, worst, c.copy(), c2_worst)
        if worst <= -cfg.margin and bounds_ok and c2_worst <= 1e-10:
            log.info("metric fit reached margin after %d iterations", it)
            break
        if it == cfg.max_iters:
            break
        if it % 500 == 0:
            loss = (viol ** 2).mean() + (R ** 2).sum(axis=1).mean() + cfg.bound_weight * (
                (lo_v ** 2).mean() + (hi_v ** 2).mean())
            log.debug("fit iteration %d: loss %.4g, worst C1 %.4g", it, loss, worst)
        g = 2.0 * weighted_quad(P1f, viol, v) / n_s
        g += 2.0 * (R.reshape(-1) @ P2f) / n_s
        g += cfg.bound_weight * 2.0 * (weighted_quad(Wbf, hi_v, vecW[:, :, -1])
                                       - weighted_quad(Wbf, lo_v, vecW[:, :, 0])) / n_s
        m1 = beta1 * m1 + (1 - beta1) * g
        m2 = beta2 * m2 + (1 - beta2) * g * g
        step = m1 / (1 - beta1 ** (it + 1)) / (np.sqrt(m2 / (1 - beta2 ** (it + 1))) + eps)
        c = c - cfg.learning_rate * step

    bounds_ok, worst, c_best, c2_worst = best
    fitted = template.with_coeffs(c_best.reshape(template.coeffs.shape))
    fitted.meta.update({"lambda": lam, "metric_bounds": list(cfg.metric_bounds), "fit_worst_c1": worst,
                        "fit_worst_c2": c2_worst, "fit_samples": int(n_s)})
    if worst > cfg.tol or not bounds_ok or c2_worst > 1e-8:
        top = evaluate(c_best)[0]
        k = int(np.argmax(top))
        raise SynthesisError(
            f"no feasible metric found: worst C1 eigenvalue {worst:.4g}, bounds ok={bounds_ok}, "
            f"C2 residual {c2_worst:.3g}",
            worst={"x": xs[k].tolist(), "theta": ths[k].tolist(), "c1_max_eig": float(top[k])})
    return fitted


def refine_metric_fit(model: SystemModel, template: PolynomialMetric, lam: float, sample_grid,
                      theta_box: ParameterBox, check_grid, check_thetas, theta_samples=None,
                      settings: FitSettings | None = None, rounds: int = 6, batch: int = 500,
                      tol: float = 0.0) -> PolynomialMetric:
    """Exchange method: fit, check C1 on a finer grid, add the worst violators, refit warm.

    Stops when no check point has a C1 eigenvalue above ``tol``.  Raises
    :class:`SynthesisError` if violators remain after ``rounds`` refits.
    """
    from .certify import check_c1, pair_grid

    cfg = settings or FitSettings()
    cx, ct = pair_grid(np.asarray(check_grid, float).reshape(-1, model.n),
                       np.asarray(check_thetas, float).reshape(-1, model.p))
    cu = np.zeros((cx.shape[0], model.m))
    extra_x = np.zeros((0, model.n))
    extra_t = np.zeros((0, model.p))
    current = template
    for rnd in range(rounds + 1):
        current = fit_metric_coeffs(model, current, lam, sample_grid, theta_box, theta_samples,
                                    settings=cfg, extra_pairs=(extra_x, extra_t))
        eig = np.concatenate([check_c1(current.to_family(lam), model, cx[i:i + 20000], ct[i:i + 20000],
                                       cu[i:i + 20000]).max_eig for i in range(0, cx.shape[0], 20000)])
        bad = np.nonzero(eig > tol)[0]
        log.info("exchange round %d: %d check points violate C1 (worst %.4g)", rnd, bad.size, eig.max())
        current.meta["check_worst_c1"] = float(eig.max())
        if bad.size == 0:
            current.meta["exchange_rounds"] = rnd
            return current
        take = bad[np.argsort(eig[bad])[::-1][:batch]]
        extra_x = np.concatenate([extra_x, cx[take]])
        extra_t = np.concatenate([extra_t, ct[take]])
    k = int(np.argmax(eig))
    raise SynthesisError(f"C1 still violated on the check grid after {rounds} exchange rounds "
                         f"(worst eigenvalue {eig[k]:.4g})",
                         worst={"x": cx[k].tolist(), "theta": ct[k].tolist(), "c1_max_eig": float(eig[k])})
