import numpy as np
import pytest
from hypothesis import given, strategies as st

from univadapt.control import backstepping_control, min_norm_ccm, min_norm_clf, min_norm_step
from univadapt.errors import InfeasibleError
from univadapt.geom import PolynomialMetric, constant_metric, solve_geodesic
from univadapt.lyap import backstepping_uclf, identity_uclf, uclf_value_and_grads
from univadapt.sim import reference_ex2
from univadapt.sysmodel import CONTRACTING, STRICT_FEEDBACK, SystemModel, eval_dynamics

from conftest import EX1_BOX, EX2_BOX, EX2_THETA


@pytest.mark.parametrize("variant", ["derived", "printed"])
def test_backstepping_zero_at_origin(variant):
    assert backstepping_control(np.zeros(3), np.array([0.3, 0.25]), variant) == 0


@pytest.mark.parametrize("variant", ["derived", "printed"])
def test_backstepping_hand_value(variant):
    assert backstepping_control(np.array([0.0, 0.0, 1.0]), np.zeros(2), variant) == pytest.approx(-6.0)


def test_derived_law_gives_exact_decay(rng):
    fam = backstepping_uclf("derived")
    for _ in range(200):
        x = rng.uniform(-2, 2, 3)
        th = EX1_BOX.sample(rng)
        u = np.atleast_1d(backstepping_control(x, th))
        ev = uclf_value_and_grads(fam, x, th)
        vdot = ev.dV_dx @ eval_dynamics(STRICT_FEEDBACK, x, th, u)
        assert vdot + 4 * ev.V <= 1e-6 * (1 + ev.V)
        assert vdot + 4 * ev.V == pytest.approx(0.0, abs=1e-9 * (1 + ev.V))


def test_derived_law_along_trajectory(rng):
    fam = backstepping_uclf("derived")
    th = EX1_BOX.sample(rng)
    x = rng.uniform(-2, 2, 3)
    dt = 1e-3
    for _ in range(3000):
        u = np.atleast_1d(backstepping_control(x, th))
        ev = uclf_value_and_grads(fam, x, th)
        xdot = eval_dynamics(STRICT_FEEDBACK, x, th, u)
        assert ev.dV_dx @ xdot + 4 * ev.V <= 1e-6 * (1 + ev.V)
        x = x + dt * xdot


def _scalar(theta_sign=-1.0):
    # xdot = theta + u written as f - Delta theta + u with Delta = -1
    return SystemModel(1, 1, 1, lambda x, t: np.zeros_like(x),
                       lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), theta_sign),
                       lambda x, t: np.ones(np.shape(x)[:-1] + (1, 1)))


def test_min_norm_clf_scalar_closed_form():
    # V = x^2 / 2, Q = x^2 = 2 V
    out = min_norm_clf(_scalar(), identity_uclf(decrement_rate=2.0), np.array([1.0]), np.array([1.0]))
    assert out.u[0] == pytest.approx(-2.0)
    assert bool(out.constraint_active)
    assert out.slack == pytest.approx(0.0, abs=1e-12)


def test_min_norm_clf_inactive():
    out = min_norm_clf(_scalar(), identity_uclf(decrement_rate=2.0), np.array([1.0]), np.array([-5.0]))
    assert out.u[0] == 0 and not bool(out.constraint_active)
    assert out.slack <= 0


def test_min_norm_clf_infeasible():
    no_input = SystemModel(1, 1, 1, lambda x, t: np.zeros_like(x),
                           lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), -1.0),
                           lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 1)))
    with pytest.raises(InfeasibleError):
        min_norm_clf(no_input, identity_uclf(decrement_rate=2.0), np.array([1.0]), np.array([1.0]))


@given(st.floats(-10, 10), st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_min_norm_step_kkt(a, b, u_ref):
    b = np.array(b)
    u_ref = np.array(u_ref)
    if np.linalg.norm(b) < 1e-6 and a + b @ u_ref > 0:
        return
    out = min_norm_step(a, b, u_ref)
    assert a + b @ out.u <= 1e-9 * (1 + abs(a) + np.abs(b).sum() * np.abs(out.u).sum())
    if out.constraint_active:
        # the solution is the projection of u_ref onto the half-space boundary
        lam = (a + b @ u_ref) / (b @ b)
        np.testing.assert_allclose(out.u, u_ref - lam * b, atol=1e-9)
    else:
        np.testing.assert_array_equal(out.u, u_ref)


def _linear_plant(A, Bm):
    A = np.asarray(A, float)
    Bm = np.asarray(Bm, float)
    n, m = Bm.shape
    return SystemModel(n, m, 1, lambda x, t: np.einsum("ij,...j->...i", A, x),
                       lambda x, t: np.zeros(np.shape(x)[:-1] + (1, n)),
                       lambda x, t: np.broadcast_to(Bm, np.shape(x)[:-1] + (n, m)))


def test_min_norm_ccm_on_reference():
    mdl = _linear_plant([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]])
    met = constant_metric(np.eye(2), lam=0.5)
    xd = np.array([0.3, -0.2])
    geo = solve_geodesic(met, np.zeros(1), xd, xd)
    out = min_norm_ccm(mdl, met, geo, xd, xd, np.array([0.7]), np.zeros(1))
    assert geo.energy == 0
    assert out.u[0] == pytest.approx(0.7)


def test_min_norm_ccm_euclidean_closed_form():
    A = np.array([[0.5, 1.0], [0.0, 0.2]])
    Bm = np.array([[0.0], [1.0]])
    mdl = _linear_plant(A, Bm)
    lam = 0.5
    met = constant_metric(np.eye(2), lam=lam)
    x, xd, ud = np.array([1.0, -0.5]), np.array([0.2, 0.1]), np.array([0.3])
    xd_dot = A @ xd + Bm @ ud
    geo = solve_geodesic(met, np.zeros(1), xd, x)
    out = min_norm_ccm(mdl, met, geo, x, xd, ud, np.zeros(1))
    e = x - xd
    a = 2 * e @ (A @ x) - 2 * e @ xd_dot + 2 * lam * e @ e
    b = 2 * e @ Bm
    resid = a + b @ ud
    expected = ud - max(resid, 0.0) / (b @ b) * b
    np.testing.assert_allclose(out.u, expected, atol=1e-10)


def test_min_norm_ccm_active_rate_matches_finite_difference():
    poly = PolynomialMetric.load(_builtin_metric())
    met = poly.to_family(0.5)
    th = EX2_THETA
    checked = 0
    for tt, x in [(0.0, np.array([0.5, 0.5, 0.0])), (1.0, np.array([1.2, -0.4, 0.9])),
                  (2.5, np.array([-0.3, 0.6, -1.0]))]:
        xd, xd_dot, ud, _ = reference_ex2(th, tt, 0.2)
        geo = solve_geodesic(met, th, xd, x, grad_tol=1e-11)
        out = min_norm_ccm(CONTRACTING, met, geo, x, xd, ud, th, x_d_dot=xd_dot)
        if not out.constraint_active:
            continue
        checked += 1
        xdot = eval_dynamics(CONTRACTING, x, th, out.u)
        h = 1e-5
        Ep = solve_geodesic(met, th, xd + h * xd_dot, x + h * xdot, grad_tol=1e-11).energy
        Em = solve_geodesic(met, th, xd - h * xd_dot, x - h * xdot, grad_tol=1e-11).energy
        fd = (Ep - Em) / (2 * h)
        assert fd == pytest.approx(-2 * 0.5 * geo.energy, rel=1e-3, abs=1e-8)
    assert checked >= 1


def _builtin_metric():
    from importlib.resources import files
    return files("univadapt") / "data" / "ex2_metric.json"
