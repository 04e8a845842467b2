"""Linear covariance steering with quadratic and linear state costs.

Problem::

    min E int 1/2 ||u||^2 + 1/2 x^T Q x + x^T r dt
    dx = (A x + a + B u) dt + sqrt(eps) B dW
    x(0) ~ N(mu0, K0),  x(T) ~ N(muT, KT)

The optimal policy is ``u = -B^T Pi (x - xbar) + v`` where ``Pi`` solves the
Riccati equation ``-dPi/dt = A^T Pi + Pi A - Pi B B^T Pi + Q`` with a terminal
value chosen so the closed-loop covariance hits ``KT``, and ``(xbar, v)``
solve a deterministic LQ two-point boundary value problem. The linear cost
``r`` only enters the mean problem.

Covariance part: write ``Pi = P + Pt`` with ``P`` the LQR Riccati solution
(``P(T) = 0``). ``Pt`` then solves the Q-free Riccati equation of the
feedback system ``At = A - B B^T P``, whose split boundary problem has an
algebraic solution in terms of ``Phi = Phi_At(T, 0)`` and the Grammian
``M = int Phi_At(T, s) B B^T Phi_At(T, s)^T ds``. ``Pi(T) = Pt(T)`` is
then pushed backward through the original Riccati equation.
Everything is discretized with Heun on a uniform grid; the terminal mean is
matched exactly at the discrete level by a final feedforward correction.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import kernels
from .errors import ConfigError, NumericalDomainError, RankError, SolverFailure

STEPS_PER_UNIT = 100


@dataclass
class SteeringProblem:
    """Coefficients sampled on a uniform grid ``times``."""

    times: np.ndarray
    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    epsilon: float
    mu0: np.ndarray
    K0: np.ndarray
    muT: np.ndarray
    KT: np.ndarray
    Q: np.ndarray = None
    r: np.ndarray = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        nt = self.times.size
        n = self.A.shape[1]
        if self.A.shape != (nt, n, n) or self.a.shape != (nt, n) or self.B.shape[:2] != (nt, n):
            raise ConfigError("system coefficients do not match the time grid")
        if self.Q is None:
            self.Q = np.zeros((nt, n, n))
        if self.r is None:
            self.r = np.zeros((nt, n))
        if not self.epsilon > 0:
            raise ConfigError("covariance steering needs epsilon > 0")
        for name in ("K0", "KT"):
            K = np.asarray(getattr(self, name), dtype=float)
            if K.shape != (n, n) or not np.allclose(K, K.T) or np.linalg.eigvalsh(K).min() <= 0:
                raise ConfigError(f"{name} must be a symmetric positive definite {n}x{n} matrix")

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def BBt(self):
        return self.B @ np.swapaxes(self.B, 1, 2)

    @classmethod
    def from_system(cls, sys, T, boundary, Q=None, r=None, steps_per_unit=STEPS_PER_UNIT):
        steps = max(1, int(round(steps_per_unit * T)))
        times = np.linspace(0.0, T, steps + 1)
        A, a, B = sys.sample(times)
        mu0, K0, muT, KT = boundary
        return cls(times, A, a, B, sys.epsilon, np.asarray(mu0, float), np.asarray(K0, float),
                   np.asarray(muT, float), np.asarray(KT, float), Q, r)


@dataclass
class SteeringSolution:
    times: np.ndarray
    Pi: np.ndarray
    gain: np.ndarray
    feedforward: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    A_cl: np.ndarray
    a_cl: np.ndarray
    epsilon: float

    @property
    def H(self):
        """Companion Riccati variable ``eps Sigma^{-1} - Pi``."""
        return self.epsilon * np.linalg.inv(self.cov) - self.Pi


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _sqrtm_spd(K):
    w, U = np.linalg.eigh(K)
    return (U * np.sqrt(w)) @ U.T, (U / np.sqrt(w)) @ U.T


def _transition_and_grammian(A, BBt, times):
    n = A.shape[1]
    Phi = kernels.linear_ode(A, None, np.eye(n), times)[-1]
    M = kernels.lyapunov_ode(A, BBt, np.zeros((n, n)), times)[-1]
    return Phi, _sym(M)


def terminal_riccati_value(At, BBt, times, eps, K0, KT):
    """Terminal ``Pt(T)`` for Q-free steering of ``At`` (and ``Pt(0)`` as a diagnostic)."""
    Phi, M = _transition_and_grammian(At, BBt, times)
    try:
        Mc = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise RankError("controllability Grammian over the horizon is singular") from exc
    Minv = sla.cho_solve((Mc, True), np.eye(M.shape[0]))
    S0h, S0ih = _sqrtm_spd(K0)
    Nin = Phi.T @ Minv @ Phi
    Dinv = S0h @ Phi.T @ Minv @ KT @ Minv @ Phi @ S0h / eps**2
    delta, U = np.linalg.eigh(_sym(Dinv))
    if delta.min() <= 0:
        raise SolverFailure("boundary map lost positive definiteness")
    v = delta / (0.5 + np.sqrt(0.25 + delta))
    V = (U * v) @ U.T
    W = eps * S0ih @ V @ S0ih
    Winv = np.linalg.solve(W, np.eye(W.shape[0]))
    PiT = _sym(Minv @ Phi @ Winv @ Phi.T @ Minv - Minv)
    Pi0 = _sym(Nin - W)
    return PiT, Pi0


def solve_covariance(prob):
    """Riccati trajectory ``Pi`` (on ``prob.times``) that steers the covariance to ``KT``."""
    times, A, BBt, Q = prob.times, prob.A, prob.BBt, prob.Q
    n = prob.n
    zeros = np.zeros((n, n))
    P = kernels.riccati_backward(A, BBt, Q, zeros, times) if np.any(Q) else np.zeros_like(A)
    At = A - BBt @ P
    PiT, _ = terminal_riccati_value(At, BBt, times, prob.epsilon, prob.K0, prob.KT)
    Pi = kernels.riccati_backward(A, BBt, Q, PiT, times)
    if not np.all(np.isfinite(Pi)):
        raise SolverFailure("Riccati solution blew up")
    return Pi, P


def solve_mean(prob, P=None):
    """Open-loop mean control ``v`` and mean trajectory ``x`` of the LQ boundary problem.

    The costate is written ``lam = P x + s + Xi nu`` with ``P`` the LQR
    Riccati solution, ``s`` the affine correction and ``Xi`` the adjoint
    transition; ``nu`` is fixed by ``x(T) = muT``.
    """
    times, A, a, B, BBt, Q, r = prob.times, prob.A, prob.a, prob.B, prob.BBt, prob.Q, prob.r
    n = prob.n
    if P is None:
        P = kernels.riccati_backward(A, BBt, Q, np.zeros((n, n)), times) if np.any(Q) else np.zeros_like(A)
    At = A - BBt @ P
    AtT = np.swapaxes(At, 1, 2)
    F = -(np.einsum("kij,kj->ki", P, a) + r)
    s = kernels.linear_ode(-AtT, F, np.zeros(n), times, backward=True)
    Xi = kernels.linear_ode(-AtT, None, np.eye(n), times, backward=True)
    BBtXi = BBt @ Xi
    x_free = kernels.linear_ode(At, a - np.einsum("kij,kj->ki", BBt, s), prob.mu0, times)
    S = kernels.linear_ode(At, -BBtXi, np.zeros((n, n)), times)
    try:
        nu = np.linalg.solve(S[-1], prob.muT - x_free[-1])
    except np.linalg.LinAlgError as exc:
        raise RankError("terminal mean is not reachable (singular boundary map)") from exc
    if np.linalg.cond(S[-1]) > 1e14:
        raise RankError("terminal mean is not reachable (singular boundary map)")
    x = x_free + np.einsum("kij,j->ki", S, nu)
    lam = np.einsum("kij,kj->ki", P, x) + s + np.einsum("kij,j->ki", Xi, nu)
    v = -np.einsum("kji,kj->ki", B, lam)
    return v, x


def closed_loop_propagate(times, A, a, B, gain, feedforward, mu0, K0, epsilon):
    """Mean and covariance of ``dx = ((A + B K) x + a + B d) dt + sqrt(eps) B dW``."""
    A_cl = A + B @ gain
    a_cl = a + np.einsum("kij,kj->ki", B, feedforward)
    z = kernels.linear_ode(A_cl, a_cl, mu0, times)
    C = epsilon * (B @ np.swapaxes(B, 1, 2))
    Sig = kernels.lyapunov_ode(A_cl, C, np.asarray(K0, dtype=float), times)
    return z, Sig


def _terminal_mean_correction(prob, A_cl, z):
    """Minimum-norm feedforward correction making the discrete ``z(T)`` equal ``muT``."""
    n = prob.n
    err = prob.muT - z[-1]
    if not np.any(err):
        return np.zeros((prob.times.size, prob.B.shape[2]))
    Psi = kernels.linear_ode(-np.swapaxes(A_cl, 1, 2), None, np.eye(n), prob.times, backward=True)
    Bt = np.swapaxes(prob.B, 1, 2)
    basis = Bt @ Psi  # (K+1, m, n): d-direction per terminal coordinate
    Sens = kernels.linear_ode(A_cl, prob.B @ basis, np.zeros((n, n)), prob.times)[-1]
    c = np.linalg.solve(Sens, err)
    return np.einsum("kij,j->ki", basis, c)


def solve(prob):
    """Full steering solution: gains, feedforward and closed-loop moments."""
    Pi, P = solve_covariance(prob)
    v, x = solve_mean(prob, P)
    Bt = np.swapaxes(prob.B, 1, 2)
    K = -Bt @ Pi
    d = v + np.einsum("kij,kj->ki", Bt @ Pi, x)
    A_cl = prob.A + prob.B @ K
    z, _ = closed_loop_propagate(prob.times, prob.A, prob.a, prob.B, K, d, prob.mu0, prob.K0, prob.epsilon)
    d = d + _terminal_mean_correction(prob, A_cl, z)
    z, Sig = closed_loop_propagate(prob.times, prob.A, prob.a, prob.B, K, d, prob.mu0, prob.K0, prob.epsilon)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(Sig))):
        raise NumericalDomainError("closed-loop moments are not finite")
    a_cl = prob.a + np.einsum("kij,kj->ki", prob.B, d)
    return SteeringSolution(prob.times, Pi, K, d, z, Sig, A_cl, a_cl, prob.epsilon)
