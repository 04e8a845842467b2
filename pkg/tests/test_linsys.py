import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from stochplan.errors import ConfigError, NumericalDomainError
from stochplan.linsys import (LTVSystem, TimeGrid, constant_velocity_system, drift_integral, grammian,
                              heun_step, linearize_planar_quadrotor, planar_quadrotor_field,
                              transition_matrix)


def _const(n, m, A=None, B=None, a=None):
    A = np.zeros((n, n)) if A is None else np.asarray(A, float)
    B = np.zeros((n, m)) if B is None else np.asarray(B, float)
    a = np.zeros(n) if a is None else np.asarray(a, float)
    return LTVSystem(n, m, lambda t: A, lambda t: a, lambda t: B)


def test_transition_examples():
    cv = constant_velocity_system(1)
    np.testing.assert_array_equal(transition_matrix(cv, 0.0, 0.0), np.eye(2))
    np.testing.assert_allclose(transition_matrix(cv, 0.0, 1.0), [[1, 1], [0, 1]])
    # the integrator agrees with the closed form
    np.testing.assert_allclose(transition_matrix(cv.as_generic(), 0.0, 1.0), [[1, 1], [0, 1]], atol=1e-14)
    np.testing.assert_allclose(transition_matrix(_const(2, 1), 0.3, 2.0), np.eye(2))


def test_transition_matches_expm():
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    sys_ = _const(2, 1, A=A, B=[[0], [1]])
    Phi = transition_matrix(sys_, 0.0, 1.0, substeps=2000)
    np.testing.assert_allclose(Phi, sla.expm(A), atol=1e-6)


def test_transition_rejects_bad_arguments():
    cv = constant_velocity_system(1)
    with pytest.raises(ValueError):
        transition_matrix(cv, 1.0, 0.0)
    bad = LTVSystem(1, 1, lambda t: np.array([[np.nan]]), lambda t: np.zeros(1), lambda t: np.ones((1, 1)))
    with pytest.raises(NumericalDomainError):
        transition_matrix(bad, 0.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_semigroup(t0, d1, d2):
    cv = constant_velocity_system(2)
    t1, t2 = t0 + d1, t0 + d1 + d2
    lhs = transition_matrix(cv, t0, t2)
    rhs = transition_matrix(cv, t1, t2) @ transition_matrix(cv, t0, t1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)


def test_grammian_examples():
    cv = constant_velocity_system(1)
    G = grammian(cv, 0.0, 1.0)
    np.testing.assert_allclose(G, [[1 / 3, 1 / 2], [1 / 2, 1]], atol=1e-15)
    # independent oracle: trapezoid quadrature of the integrand on a fine grid
    s = np.linspace(0.0, 1.0, 20001)
    integrand = np.array([[[(1 - u) ** 2, 1 - u], [1 - u, 1.0]] for u in s])
    np.testing.assert_allclose(np.trapezoid(integrand, s, axis=0) if hasattr(np, "trapezoid")
                               else np.trapz(integrand, s, axis=0), G, atol=1e-8)
    np.testing.assert_allclose(grammian(cv.as_generic(), 0.0, 1.0, substeps=400), G, atol=1e-5)
    assert np.linalg.norm(grammian(cv, 0.0, 1e-8)) < 1e-7
    np.testing.assert_array_equal(grammian(_const(2, 1), 0.0, 1.0), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        grammian(cv, 1.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_grammian_symmetric_psd(seed, dt):
    rng = np.random.default_rng(seed)
    sys_ = _const(3, 2, A=0.5 * rng.standard_normal((3, 3)), B=rng.standard_normal((3, 2)))
    G = grammian(sys_, 0.0, dt)
    assert np.abs(G - G.T).max() < 1e-12
    assert np.linalg.eigvalsh(G).min() >= -1e-10


def test_drift_integral_constant_drift():
    # x' = a with A = 0 gives a * dt
    sys_ = _const(2, 1, a=[1.0, -2.0])
    np.testing.assert_allclose(drift_integral(sys_, 0.0, 0.5), [0.5, -1.0], atol=1e-14)


def test_heun_examples():
    np.testing.assert_array_equal(heun_step(lambda t, y: np.zeros(2), [1.0, 2.0], 0.0, 0.1), [1.0, 2.0])
    assert heun_step(lambda t, y: y, 1.0, 0.0, 0.1) == pytest.approx(1.105, abs=1e-15)
    assert heun_step(lambda t, y: 1.0, 0.0, 0.0, 0.5) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        heun_step(lambda t, y: y, 1.0, 0.0, 0.0)
    with pytest.raises(NumericalDomainError):
        heun_step(lambda t, y: np.inf, 1.0, 0.0, 0.1)


def test_heun_second_order():
    def err(h):
        y, t = 1.0, 0.0
        for _ in range(int(round(1 / h))):
            y = heun_step(lambda t, y: y, y, t, h)
            t += h
        return abs(y - np.e)

    ratio = err(0.01) / err(0.005)
    assert 3.5 <= ratio <= 4.5


@pytest.mark.parametrize("dof", [1, 2, 7])
def test_constant_velocity_structure(dof):
    sys_ = constant_velocity_system(dof)
    A, a, B = sys_.A(0.0), sys_.a(0.0), sys_.B(0.0)
    assert A.shape == (2 * dof, 2 * dof) and B.shape == (2 * dof, dof)
    np.testing.assert_array_equal(A[:dof, dof:], np.eye(dof))
    assert np.count_nonzero(A) == dof
    np.testing.assert_array_equal(B[dof:], np.eye(dof))
    np.testing.assert_array_equal(B[:dof], 0.0)
    np.testing.assert_array_equal(a, 0.0)
    with pytest.raises(ConfigError):
        constant_velocity_system(0)


def test_time_grid():
    g = TimeGrid.uniform(0.0, 2.0, 4, substeps=5)
    assert g.N == 4
    assert g.fine.size == 21
    np.testing.assert_allclose(g.fine[::5], g.knots)
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 1.0, [0.0, 0.5, 0.5, 1.0])


def _fd_jacobians(x, mass, inertia, arm, g, h=1e-6):
    u = np.array([mass * g / 2] * 2)
    A = np.empty((6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        A[:, j] = (planar_quadrotor_field(x + e, u, mass, inertia, arm, g)
                   - planar_quadrotor_field(x - e, u, mass, inertia, arm, g)) / (2 * h)
    B = np.empty((6, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        B[:, j] = (planar_quadrotor_field(x, u + e, mass, inertia, arm, g)
                   - planar_quadrotor_field(x, u - e, mass, inertia, arm, g)) / (2 * h)
    return A, B


def test_quadrotor_examples():
    A, B = linearize_planar_quadrotor(np.zeros(6), 1.0, 0.1, 0.3, 9.81)
    np.testing.assert_allclose(A[3], [0, 0, -9.81, 0, 0, 0])
    np.testing.assert_array_equal(B[:4], 0.0)
    A, _ = linearize_planar_quadrotor([0, 0, 0, 1.0, 0, 0], 1.0, 0.1, 0.3)
    assert A[0, 3] == 1.0
    with pytest.raises(ConfigError):
        linearize_planar_quadrotor(np.zeros(6), 0.0, 0.1, 0.3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6))
def test_quadrotor_matches_finite_differences(x):
    x = np.asarray(x)
    A, B = linearize_planar_quadrotor(x, 1.2, 0.15, 0.25)
    Af, Bf = _fd_jacobians(x, 1.2, 0.15, 0.25, 9.81)
    assert np.linalg.norm(A - Af) <= 1e-6 * max(1.0, np.linalg.norm(A))
    assert np.linalg.norm(B - Bf) <= 1e-6 * max(1.0, np.linalg.norm(B))
