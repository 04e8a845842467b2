import numpy as np
import pytest

from conftest import small_prior
from stochplan.blocktri import BlockTridiag
from stochplan.environment import CollisionModel, CollisionParams, RobotModel, SignedDistanceField
from stochplan.errors import ConfigError
from stochplan.gp_prior import FactorMap, QuadFactor, prior_factors
from stochplan.gvi import (GaussianTrajectory, GVIConfig, backtrack, collision_factors, cost_report,
                           factor_derivatives, gvi_solve, initial_trajectory, natural_gradient_step,
                           nl_factor_derivs, objective, quad_factor_derivs)
from stochplan.quadrature import gh_expect, gh_rule


def gh_quad_derivs(Lam, Psi, W, mu_ref, mean, cov, p=3):
    """Quadrature oracle: value, Stein gradient and Hessian of E||Lam X - Psi mu_ref||^2_W."""
    rule = gh_rule(p)
    t = Psi @ mu_ref

    def psi(X):
        R = X @ Lam.T - t
        return np.einsum("mi,ij,mj->m", R, W, R)

    Si = np.linalg.inv(cov)
    E0 = gh_expect(rule, psi, mean, cov, batched=True)
    E1 = gh_expect(rule, lambda X: (X - mean) * psi(X)[:, None], mean, cov, batched=True)
    E2 = gh_expect(rule, lambda X: np.einsum("mi,mj,m->mij", X - mean, X - mean, psi(X)), mean, cov,
                   batched=True)
    return E0, Si @ E1, Si @ E2 @ Si - Si * E0


def random_factor(rng, k, n):
    Lam = rng.standard_normal((k, n))
    Psi = rng.standard_normal((k, n))
    G = rng.standard_normal((k, k))
    W = G @ G.T + 0.5 * np.eye(k)
    G = rng.standard_normal((n, n))
    cov = G @ G.T / n + 0.2 * np.eye(n)
    return Lam, Psi, W, rng.standard_normal(n), rng.standard_normal(n), cov


def test_quad_factor_examples():
    I = np.eye(2)
    v, g, _ = quad_factor_derivs(I, np.zeros((2, 2)), I, np.zeros(2), np.zeros(2), I)
    assert v == pytest.approx(2.0)
    np.testing.assert_array_equal(g, 0.0)
    v, g, _ = quad_factor_derivs(I, I, I, np.zeros(2), np.array([1.0, 0.0]), I)
    assert v == pytest.approx(3.0)
    np.testing.assert_allclose(g, [2.0, 0.0])
    with pytest.raises(ValueError):
        quad_factor_derivs(I, I, I, np.zeros(2), np.zeros(3), I)


def test_quad_factor_matches_quadrature(rng):
    for _ in range(20):
        args = random_factor(rng, 3, 4)
        for a, b in zip(quad_factor_derivs(*args), gh_quad_derivs(*args)):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10 * max(1.0, np.max(np.abs(b))))


def test_nl_factor_examples():
    rule = gh_rule(3)
    S = np.array([[2.0, 0.3], [0.3, 0.5]])
    m = np.array([0.4, -1.0])
    E0, E1, E2 = nl_factor_derivs(lambda X: np.zeros(len(X)), m, S, rule)
    assert E0 == 0.0 and not np.any(E1) and not np.any(E2)
    E0, E1, E2 = nl_factor_derivs(lambda X: np.ones(len(X)), m, S, rule)
    assert E0 == pytest.approx(1.0)
    np.testing.assert_allclose(E1, 0.0, atol=1e-14)
    np.testing.assert_allclose(E2, S, atol=1e-14)
    E0, E1, E2 = nl_factor_derivs(lambda X: np.sum(X**2, axis=1), np.zeros(2), np.eye(2), rule)
    assert E0 == pytest.approx(2.0)
    np.testing.assert_allclose(E1, 0.0, atol=1e-14)
    np.testing.assert_allclose(E2, 4 * np.eye(2), atol=1e-13)


def test_fourth_moment_matches_monte_carlo():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((400_000, 2))
    mc = np.einsum("mi,mj,m->ij", X, X, np.sum(X**2, axis=1)) / len(X)
    np.testing.assert_allclose(mc, 4 * np.eye(2), atol=0.06)


def test_fixed_point_of_gaussian_posterior():
    p = small_prior(N=5, dof=2, goal=[1.0, -1.0, 0.0, 0.0])
    q = GaussianTrajectory(p.mu.copy(), p.Kinv.copy())
    dmu, dprec, _ = natural_gradient_step(q, prior_factors(p), 1.0, gh_rule(3))
    assert np.linalg.norm(dmu) + dprec.fro_norm() < 1e-9


def test_prior_only_converges_to_prior():
    p = small_prior(N=6, dof=2, goal=[2.0, 1.0, 0.0, 0.0])
    q0 = GaussianTrajectory(p.mu + 0.3, p.Kinv.scaled(3.0))
    cfg = GVIConfig(eta=0.5, T_low=1.0, T_high=1.0, iterations=100, n_low=100)
    res = gvi_solve(p, None, cfg, q0)
    assert np.abs(res.q.mu - p.mu).max() < 1e-6
    assert (res.q.prec - p.Kinv).fro_norm() < 1e-6 * p.Kinv.fro_norm()


def test_scalar_toy_posterior():
    fm = FactorMap((0,), 1)
    f = [QuadFactor(fm, np.eye(1), np.eye(1), np.eye(1), np.zeros(1), "unary_start")]
    q = GaussianTrajectory(np.array([1.0]), BlockTridiag(np.array([[[0.25]]]), np.zeros((0, 1, 1))))
    rule = gh_rule(3)
    for _ in range(60):
        dmu, dprec, cur = natural_gradient_step(q, f, 1.0, rule)
        q, _, _, ok = backtrack(q, dmu, dprec, 0.7, 20, lambda c: objective(c, f, 1.0, rule)[0], cur)
        if not ok:
            break
    assert q.mu[0] == pytest.approx(0.0, abs=1e-6)
    assert q.prec.diag[0, 0, 0] == pytest.approx(1.0, abs=1e-6)


def _scalar_problem(prec):
    fm = FactorMap((0,), 1)
    f = [QuadFactor(fm, np.eye(1), np.eye(1), np.eye(1), np.zeros(1), "unary_start")]
    q = GaussianTrajectory(np.array([0.0]), BlockTridiag(np.array([[[prec]]]), np.zeros((0, 1, 1))))
    rule = gh_rule(3)
    return q, lambda c: objective(c, f, 1.0, rule)[0]


def test_backtrack_zero_step_stalls():
    q, fn = _scalar_problem(1.0)
    zero = BlockTridiag(np.zeros((1, 1, 1)), np.zeros((0, 1, 1)))
    out, cost, R, ok = backtrack(q, np.zeros(1), zero, 0.9, 5, fn)
    assert not ok and out is q and cost == fn(q)


def test_backtrack_skips_indefinite_candidates():
    q, fn = _scalar_problem(10.0)
    dprec = q.prec.scaled(-1.9)
    out, cost, R, ok = backtrack(q, np.zeros(1), dprec, 0.9, 20, fn)
    assert ok and R >= 2
    assert out.prec.is_pd() and cost < fn(q)


def test_cost_report_identities():
    p = small_prior(N=4, dof=2)
    f = prior_factors(p)
    rule = gh_rule(3)
    q = GaussianTrajectory(p.mu.copy(), p.Kinv.copy())
    rep = cost_report(q, p, f, rule)
    assert rep.prior == pytest.approx(0.5 * p.dim, rel=1e-10)
    assert rep.collision == 0.0
    assert rep.mp == pytest.approx(rep.prior + rep.collision)
    assert rep.total == pytest.approx(rep.mp + rep.entropy)
    half = GaussianTrajectory(q.mu, q.prec.scaled(2.0))
    assert cost_report(half, p, f, rule).entropy - rep.entropy == pytest.approx(p.dim * np.log(2), rel=1e-10)


def test_scatter_matches_dense_gradient(rng):
    p = small_prior(N=5, dof=2, goal=[1.0, 2.0, 0.0, 0.0])
    q = GaussianTrajectory(p.mu + rng.standard_normal(p.dim), p.Kinv.scaled(1.5))
    _, grad, hess = factor_derivatives(q, prior_factors(p), gh_rule(3))
    K = p.Kinv.to_dense()
    np.testing.assert_allclose(grad.ravel(), K @ (q.mu - p.mu), atol=1e-8)
    np.testing.assert_allclose(hess.to_dense(), K, atol=1e-8)


def linear_model(slope=(0.6, 0.8)):
    axes = [-20.0 + np.arange(41.0)] * 2
    X, Y = np.meshgrid(*axes, indexing="ij")
    f = SignedDistanceField(slope[0] * X + slope[1] * Y, [-20.0, -20.0], 1.0)
    return CollisionModel(RobotModel("point_robot", 2, 0.5), f, CollisionParams(1.0, 5.0))


def expected_cost_gradient_fd(q, factors, rule, h=1e-5):
    def J(mu):
        c, _, _ = factor_derivatives(GaussianTrajectory(mu, q.prec), factors, rule, with_derivs=False)
        return sum(c.values())

    g = np.empty_like(q.mu)
    for j in range(q.mu.size):
        e = np.zeros_like(q.mu)
        e[j] = h
        g[j] = (J(q.mu + e) - J(q.mu - e)) / (2 * h)
    return g


def test_gradient_matches_finite_differences(rng):
    p = small_prior(N=4, dof=2, K=0.01, start=[-3, -3, 0, 0], goal=[-2, -3, 0, 0])
    model = linear_model()
    f = list(prior_factors(p)) + collision_factors(model, p.N + 1, p.state_dim)
    rule = gh_rule(3)
    q = GaussianTrajectory(p.mu + 0.2 * rng.standard_normal(p.dim), p.Kinv.scaled(4.0))
    _, grad, _ = factor_derivatives(q, f, rule)
    fd = expected_cost_gradient_fd(q, f, rule)
    assert np.linalg.norm(grad.ravel() - fd) <= 1e-6 * np.linalg.norm(fd)


def test_initial_trajectory_through_waypoints():
    p = small_prior(N=4, dof=2, start=[0, 0, 0, 0], goal=[4, 0, 0, 0])
    q = initial_trajectory(p, [[2.0, 2.0]])
    X = q.means()
    np.testing.assert_allclose(X[2, :2], [2.0, 2.0])
    np.testing.assert_array_equal(X[:, 2:], 0.0)
    np.testing.assert_array_equal(q.prec.diag, p.Kinv.diag)


def test_run_is_monotone_within_phases_and_stays_pd():
    boxes = [([0.0, 0.0], [1.0, 1.0])]
    f = SignedDistanceField.from_boxes([-6.0, -6.0], [61, 61], 0.2, boxes)
    model = CollisionModel(RobotModel("point_robot", 2, 0.2), f, CollisionParams(0.5, 100.0))
    p = small_prior(N=8, dof=2, K=0.01, T=2.0, start=[-4, 0.3, 0, 0], goal=[4, 0.3, 0, 0])
    res = gvi_solve(p, model, GVIConfig(eta=0.5, iterations=40, n_low=20, T_low=1.0, T_high=5.0))
    h = res.history
    for a, b in zip(h[:-1], h[1:]):
        if a.temperature == b.temperature:
            assert b.objective <= a.objective + 1e-12
    assert res.q.prec.max_asymmetry() < 1e-12
    assert res.q.prec.is_pd()
    assert res.switched_at is not None


def test_config_validation():
    with pytest.raises(ConfigError):
        GVIConfig(eta=1.5)
    with pytest.raises(ConfigError):
        GVIConfig(iterations=10, n_low=11)
    p = small_prior(N=3, dof=1)
    with pytest.raises(ConfigError):
        gvi_solve(p, linear_model(), GVIConfig())
