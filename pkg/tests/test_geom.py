import numpy as np
import pytest
from hypothesis import given, strategies as st

from univadapt.errors import DegeneracyError, PreconditionError, SynthesisError
from univadapt.geom import (FitSettings, MetricFamily, PolynomialMetric, adapt_rhs_uccm, annihilator, check_c1,
                            check_c2, constant_metric, curve_energy, energy_param_grad, energy_rate_report,
                            fit_metric_coeffs, solve_geodesic, validate_uccm)
from univadapt.lyap import AdaptGains, AdaptState, ScalingFunction
from univadapt.sysmodel import CONTRACTING, ParameterBox, SystemModel, eval_dynamics

from conftest import EX2_BOX, EX2_THETA
from test_control import _builtin_metric


def linear_model(A, Bm, G=None):
    """``xdot = (A - theta G) x + B u`` with a scalar parameter."""
    A = np.asarray(A, float)
    Bm = np.asarray(Bm, float)
    n, m = Bm.shape
    G = np.zeros((n, n)) if G is None else np.asarray(G, float)
    return SystemModel(
        n, m, 1,
        lambda x, t: np.einsum("ij,...j->...i", A, x),
        lambda x, t: np.einsum("ij,...j->...i", G, x)[..., None, :],
        lambda x, t: np.broadcast_to(Bm, np.shape(x)[:-1] + (n, m)),
        jac_f=lambda x, t: np.broadcast_to(A, np.shape(x) + (n,)),
        jac_phi=lambda x, t: np.broadcast_to(G, np.shape(x)[:-1] + (1, n, n)),
        jac_b=lambda x, t: np.zeros(np.shape(x)[:-1] + (m, n, n)))


@pytest.fixture(scope="module")
def shipped():
    return PolynomialMetric.load(_builtin_metric()).to_family(0.5)


def _quadratic_metric():
    """``M = (1 + x1^2 + theta) I`` in two dimensions (dual given in closed form)."""
    def dual(x, th, t=0.0):
        x = np.asarray(x, float)
        s = 1.0 + x[..., 0] ** 2 + np.asarray(th, float)[..., 0]
        return np.eye(2) / s[..., None, None]

    def ddx(x, th, t=0.0):
        x = np.asarray(x, float)
        s = 1.0 + x[..., 0] ** 2 + np.asarray(th, float)[..., 0]
        out = np.zeros(x.shape[:-1] + (2, 2, 2))
        out[..., 0, :, :] = -2 * x[..., 0, None, None] * np.eye(2) / s[..., None, None] ** 2
        return out

    def ddth(x, th, t=0.0):
        x = np.asarray(x, float)
        s = 1.0 + x[..., 0] ** 2 + np.asarray(th, float)[..., 0]
        return (-np.eye(2) / s[..., None, None] ** 2)[..., None, :, :]

    return MetricFamily(dual, ddx, ddth, 0.5)


# -- metric families -------------------------------------------------------------

def test_shipped_metric_invariants(shipped, rng):
    xs = rng.uniform([-2, -2, -4], [2, 2, 4], (300, 3))
    ths = np.stack([EX2_BOX.sample(rng) for _ in range(300)])
    W = shipped.dual(xs, ths)
    M = shipped.metric(xs, ths)
    np.testing.assert_allclose(W, np.swapaxes(W, -1, -2), atol=0)
    assert np.linalg.eigvalsh(M).min() > 0
    np.testing.assert_allclose(M @ W, np.broadcast_to(np.eye(3), M.shape), atol=1e-10)


def test_polynomial_metric_roundtrip(tmp_path):
    tpl = PolynomialMetric.template(3, 4, 2, state_vars=[0, 1], theta_degree=1)
    rng = np.random.default_rng(0)
    poly = tpl.with_coeffs(rng.normal(size=tpl.coeffs.shape))
    poly.save(tmp_path / "m.json")
    back = PolynomialMetric.load(tmp_path / "m.json")
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(back.dual(x, EX2_THETA), poly.dual(x, EX2_THETA), rtol=0, atol=0)


def test_constant_metric_bounds():
    met = constant_metric(np.diag([1.0, 4.0]), lam=0.3)
    assert met.uniform_bounds == (1.0, 4.0)
    np.testing.assert_allclose(met.metric(np.zeros(2), np.zeros(1)), np.diag([1.0, 4.0]))


# -- annihilator -------------------------------------------------------------------

def test_annihilator_examples(rng):
    Bp = annihilator(np.array([[0.0], [0.0], [1.0]]))
    assert Bp.shape == (3, 2)
    np.testing.assert_allclose(np.abs(Bp[2]), 0, atol=1e-15)
    np.testing.assert_allclose(Bp.T @ Bp, np.eye(2), atol=1e-15)
    assert annihilator(np.eye(3)).shape == (3, 0)
    B = rng.normal(size=(4, 2))
    Bp = annihilator(B)
    assert np.abs(Bp.T @ B).max() <= 1e-12
    np.testing.assert_allclose(Bp.T @ Bp, np.eye(2), atol=1e-12)


def test_annihilator_rank_deficient():
    with pytest.raises(DegeneracyError):
        annihilator(np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]]))


# -- C1 / C2 ----------------------------------------------------------------------

def test_c1_vacuous_with_full_actuation():
    mdl = linear_model([[-1.0]], [[1.0]])
    res = check_c1(constant_metric(np.eye(1)), mdl, np.array([0.4]), np.zeros(1), np.zeros(1))
    assert res.passed


def test_c1_closed_form_pass():
    a, w, lam = 2.0, 0.7, 0.5
    mdl = linear_model(-a * np.eye(3), [[0.0], [0.0], [1.0]])
    met = constant_metric(np.eye(3) / w, lam=lam)
    res = check_c1(met, mdl, np.array([0.1, 0.2, 0.3]), np.zeros(1), np.zeros(1))
    assert float(res.max_eig) == pytest.approx(2 * w * (lam - a))
    assert res.passed


def test_c1_closed_form_violation():
    lam = 0.5
    W = np.diag([0.5, 2.0, 1.0])
    mdl = linear_model(np.zeros((3, 3)), [[0.0], [0.0], [1.0]])
    res = check_c1(constant_metric(np.linalg.inv(W), lam=lam), mdl, np.zeros(3), np.zeros(1), np.zeros(1))
    # projected onto span{e1, e2} the matrix is 2 lam diag(0.5, 2)
    assert float(res.max_eig) == pytest.approx(2 * lam * 2.0)
    assert not res.passed


def test_c2_zero_for_x3_independent_metric(shipped, rng):
    xs = rng.uniform(-2, 2, (200, 3))
    res = check_c2(shipped, CONTRACTING, xs, EX2_THETA)
    assert res.passed and res.residuals.max() == 0


def test_c2_reports_x3_dependence():
    tpl = PolynomialMetric.template(3, 4, 1)
    C = tpl.coeffs.copy()
    k = int(np.nonzero((tpl.exponents == [0, 0, 1, 0, 0, 0, 0]).all(axis=1))[0][0])
    C[k, 0] = 0.3                       # W_11 gains 0.3 x3
    res = check_c2(tpl.with_coeffs(C).to_family(0.5), CONTRACTING, np.array([0.2, 0.1, 0.4]), EX2_THETA)
    assert not res.passed
    assert res.residuals.item() == pytest.approx(0.3)


@given(st.integers(0, 2 ** 31 - 1))
def test_c2_random_x3_free_polynomials(seed):
    rng = np.random.default_rng(seed)
    tpl = PolynomialMetric.template(3, 4, 2, state_vars=[0, 1])
    met = tpl.with_coeffs(rng.normal(size=tpl.coeffs.shape)).to_family(0.5)
    res = check_c2(met, CONTRACTING, rng.uniform(-2, 2, (20, 3)), EX2_BOX.sample(rng))
    assert res.passed


def test_validator_reports_worst_point():
    # xdot1 = x1^2 / 2 (unactuated), xdot2 = u; with W = I the projected C1 is 2 x1 + 2 lam
    mdl = SystemModel(2, 1, 1,
                      lambda x, t: np.stack([0.5 * x[..., 0] ** 2, np.zeros_like(x[..., 0])], axis=-1),
                      lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 2)),
                      lambda x, t: np.broadcast_to([[0.0], [1.0]], np.shape(x)[:-1] + (2, 1)),
                      jac_f=lambda x, t: np.einsum("...,ij->...ij", x[..., 0], [[1.0, 0.0], [0.0, 0.0]]),
                      jac_phi=lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 2, 2)),
                      jac_b=lambda x, t: np.zeros(np.shape(x)[:-1] + (1, 2, 2)))
    grid = ParameterBox(np.array([-2.0, -1.0]), np.array([2.0, 1.0])).grid(9)
    rep = validate_uccm(constant_metric(np.eye(2), lam=0.5), mdl, grid, np.zeros((1, 1)))
    assert not rep.passed
    assert rep.worst_value == pytest.approx(2 * 2.0 + 2 * 0.5)
    assert rep.worst_point["x"][0] == pytest.approx(2.0)


def test_validator_empty_grid():
    rep = validate_uccm(constant_metric(np.eye(3)), CONTRACTING, np.zeros((0, 3)), EX2_BOX.grid(2))
    assert rep.passed and rep.warnings


# -- geodesics -------------------------------------------------------------------

def test_euclidean_geodesic():
    met = constant_metric(np.eye(3))
    xd, x = np.array([0.1, -0.3, 0.2]), np.array([1.0, 0.5, -0.7])
    geo = solve_geodesic(met, np.zeros(1), xd, x)
    assert geo.converged
    assert geo.energy == pytest.approx(np.sum((x - xd) ** 2), abs=1e-10)
    np.testing.assert_allclose(geo.speeds, np.broadcast_to(x - xd, geo.speeds.shape), atol=1e-10)
    np.testing.assert_allclose(geo.nodes, np.linspace(xd, x, geo.n_segments + 1), atol=1e-10)


def test_scaled_euclidean_energy():
    geo = solve_geodesic(constant_metric(2 * np.eye(3)), np.zeros(1), np.zeros(3), np.array([1.0, 0, 0]))
    assert geo.energy == pytest.approx(2.0)


def test_degenerate_geodesic():
    x = np.array([0.3, 0.3, 0.3])
    geo = solve_geodesic(constant_metric(np.eye(3)), np.zeros(1), x, x)
    assert geo.energy == 0 and geo.converged
    np.testing.assert_array_equal(geo.nodes, np.broadcast_to(x, geo.nodes.shape))


def test_geodesic_properties_on_shipped_metric(shipped, rng):
    for _ in range(10):
        xd = rng.uniform(-1, 1, 3)
        x = xd + rng.uniform(-1.5, 1.5, 3)
        th = EX2_BOX.sample(rng)
        geo = solve_geodesic(shipped, th, xd, x)
        np.testing.assert_array_equal(geo.nodes[0], xd)
        np.testing.assert_array_equal(geo.nodes[-1], x)
        straight = curve_energy(shipped, np.linspace(xd, x, geo.n_segments + 1), th)
        assert geo.energy <= straight
        assert geo.converged
        assert geo.speed_deviation(shipped, th) < 1e-3


def test_geodesic_unconverged_returns_best(shipped):
    geo = solve_geodesic(shipped, EX2_THETA, np.zeros(3), np.array([1.5, -1.5, 2.0]), max_iters=1, grad_tol=0)
    assert not geo.converged
    assert geo.energy <= geo.energy_history[0]


def test_geodesic_indefinite_metric():
    bad = MetricFamily(lambda x, th, t=0.0: np.broadcast_to(np.diag([1.0, -1.0]), np.shape(x)[:-1] + (2, 2)),
                       lambda x, th, t=0.0: np.zeros(np.shape(x)[:-1] + (2, 2, 2)),
                       lambda x, th, t=0.0: np.zeros(np.shape(x)[:-1] + (1, 2, 2)), 0.5)
    with pytest.raises(DegeneracyError):
        solve_geodesic(bad, np.zeros(1), np.zeros(2), np.ones(2))


def test_energy_param_grad_examples():
    geo = solve_geodesic(constant_metric(np.eye(3)), np.zeros(1), np.zeros(3), np.array([1.0, 0, 0]))
    np.testing.assert_array_equal(energy_param_grad(constant_metric(np.eye(3)), geo, np.zeros(1)), 0)

    def dual(x, th, t=0.0):
        return np.broadcast_to(np.eye(3) / (1 + th[0]), np.shape(x)[:-1] + (3, 3))

    def ddth(x, th, t=0.0):
        return np.broadcast_to(-np.eye(3) / (1 + th[0]) ** 2, np.shape(x)[:-1] + (1, 3, 3))

    met = MetricFamily(dual, lambda x, th, t=0.0: np.zeros(np.shape(x)[:-1] + (3, 3, 3)), ddth, 0.5)
    th = np.array([0.4])
    geo = solve_geodesic(met, th, np.zeros(3), np.array([1.0, 0, 0]))
    assert energy_param_grad(met, geo, th)[0] == pytest.approx(1.0)


def test_energy_param_grad_matches_resolve(shipped, rng):
    for _ in range(5):
        xd = rng.uniform(-1, 1, 3)
        x = xd + rng.uniform(-1, 1, 3)
        th = EX2_BOX.sample(rng)
        geo = solve_geodesic(shipped, th, xd, x, grad_tol=1e-12)
        g = energy_param_grad(shipped, geo, th)
        h = 1e-5
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd = (solve_geodesic(shipped, th + e, xd, x, grad_tol=1e-12).energy
                  - solve_geodesic(shipped, th - e, xd, x, grad_tol=1e-12).energy) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_energy_param_grad_needs_converged(shipped):
    geo = solve_geodesic(shipped, EX2_THETA, np.zeros(3), np.array([1.5, -1.5, 2.0]), max_iters=1, grad_tol=0)
    with pytest.raises(PreconditionError):
        energy_param_grad(shipped, geo, EX2_THETA)


# -- adaptation and energy bookkeeping ----------------------------------------

def _unit_regressor_model(delta=1.0):
    return SystemModel(1, 1, 1, lambda x, t: np.zeros_like(x),
                       lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), delta),
                       lambda x, t: np.ones(np.shape(x)[:-1] + (1, 1)))


def test_adapt_rhs_uccm_examples():
    met = constant_metric(np.eye(1), p=1)
    sc, gains = ScalingFunction(), AdaptGains(np.eye(1), 0.5)
    state = AdaptState(np.array([0.2]))
    x, xd = np.array([1.5]), np.array([0.5])
    geo = solve_geodesic(met, state.theta_hat, xd, x)
    thd, rhod = adapt_rhs_uccm(_unit_regressor_model(), met, sc, gains, x, xd, state, geo)
    assert thd[0] == pytest.approx(-(x - xd)[0])
    assert rhod == 0     # metric independent of theta
    thd, rhod = adapt_rhs_uccm(_unit_regressor_model(0.0), met, sc, gains, x, xd, state, geo)
    assert thd[0] == 0 and rhod == 0
    same = solve_geodesic(met, state.theta_hat, xd, xd)
    thd, rhod = adapt_rhs_uccm(_unit_regressor_model(), met, sc, gains, xd, xd, state, same)
    assert thd[0] == 0 and rhod == 0


def test_adapt_rhs_uccm_cancellation(shipped, rng):
    sc, gains = ScalingFunction(), AdaptGains(5 * np.eye(4), 0.1)
    for _ in range(5):
        xd = rng.uniform(-1, 1, 3)
        x = xd + rng.uniform(-1, 1, 3)
        state = AdaptState(EX2_BOX.sample(rng), rho=rng.uniform(-5, 5))
        geo = solve_geodesic(shipped, state.theta_hat, xd, x)
        thd, rhod = adapt_rhs_uccm(CONTRACTING, shipped, sc, gains, x, xd, state, geo)
        dE = energy_param_grad(shipped, geo, state.theta_hat)
        total = sc.derivative(state.rho) * rhod * (geo.energy + 0.1) + sc.value(state.rho) * dE @ thd
        assert abs(total) <= 1e-10 * (1 + abs(sc.value(state.rho) * dE @ thd))


def test_energy_rate_report_identities(shipped):
    th = EX2_THETA
    xd = np.array([0.2, -0.1, 0.3])
    geo0 = solve_geodesic(shipped, th, xd, xd)
    rep = energy_rate_report(CONTRACTING, shipped, geo0, xd, xd, np.array([0.4]), np.array([0.4]),
                             AdaptState(th), th)
    assert rep.term_estimated_system + rep.term_reference_model == pytest.approx(0.0, abs=1e-14)
    x = np.array([1.0, 0.4, -0.2])
    geo = solve_geodesic(shipped, th, xd, x)
    rep = energy_rate_report(CONTRACTING, shipped, geo, x, xd, np.array([0.1]), np.array([0.4]),
                             AdaptState(th), th)
    assert rep.term_mismatch == 0


def test_energy_rate_report_matches_simulation(shipped):
    th_hat = EX2_BOX.center
    th_true = EX2_THETA
    xd, x = np.array([0.2, -0.1, 0.3]), np.array([1.0, 0.4, -0.2])
    u, ud = np.array([0.3]), np.array([-0.2])
    geo = solve_geodesic(shipped, th_hat, xd, x, grad_tol=1e-12)
    rep = energy_rate_report(CONTRACTING, shipped, geo, x, xd, u, ud, AdaptState(th_hat), th_true)
    dt = 1e-3
    xdot = eval_dynamics(CONTRACTING, x, th_true, u)
    xd_dot = eval_dynamics(CONTRACTING, xd, th_hat, ud)
    E1 = solve_geodesic(shipped, th_hat, xd + dt * xd_dot, x + dt * xdot, grad_tol=1e-12).energy
    E0 = solve_geodesic(shipped, th_hat, xd - dt * xd_dot, x - dt * xdot, grad_tol=1e-12).energy
    assert rep.total == pytest.approx(0.5 * (E1 - E0) / (2 * dt), rel=1e-2)


# -- fitting ----------------------------------------------------------------------

def test_fit_recovers_linear_instance():
    # theta in [0, 1]; W = I satisfies the projected LMI with margin
    mdl = linear_model([[-1.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], G=[[0.5, 0.0], [0.0, 0.0]])
    box = ParameterBox(np.array([0.0]), np.array([1.0]))
    tpl = PolynomialMetric.template(2, 1, 0, scale=3.0)
    coarse = ParameterBox(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    fitted = fit_metric_coeffs(mdl, tpl, 0.5, coarse.grid(3), box, settings=FitSettings(margin=0.05))
    rep = validate_uccm(fitted.to_family(0.5), mdl, coarse.grid(30), box.grid(30))
    assert rep.passed


def test_fit_reports_infeasible_rate():
    # unactuated direction decays at rate 1, so lambda = 2 cannot be certified
    mdl = linear_model([[-1.0, 0.0], [0.0, 0.0]], [[0.0], [1.0]])
    tpl = PolynomialMetric.template(2, 1, 0)
    grid = ParameterBox(np.array([-1.0, -1.0]), np.array([1.0, 1.0])).grid(3)
    with pytest.raises(SynthesisError) as info:
        fit_metric_coeffs(mdl, tpl, 2.0, grid, ParameterBox(np.zeros(1), np.ones(1)),
                          settings=FitSettings(max_iters=300))
    assert "c1_max_eig" in info.value.worst


def test_degree_zero_template_has_no_c2_residual():
    tpl = PolynomialMetric.template(3, 4, 0)
    grid = ParameterBox(np.array([-2.0, -2.0, -4.0]), np.array([2.0, 2.0, 4.0])).grid(3)
    fitted = fit_metric_coeffs(CONTRACTING, tpl, 0.5, grid, EX2_BOX, settings=FitSettings(max_iters=2000))
    assert fitted.meta["fit_worst_c2"] == 0
    assert check_c2(fitted.to_family(0.5), CONTRACTING, grid, EX2_THETA).residuals.max() == 0
