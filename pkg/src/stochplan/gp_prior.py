"""Discretized Gauss-Markov trajectory prior and its factorization.

The prior over support states ``X = [X_0, ..., X_N]`` is

    p(X) ∝ exp(-1/2 ||G X - b||^2_{Q^{-1}})

with ``G`` block lower-bidiagonal plus a trailing terminal row, ``Q^{-1}``
block diagonal ``[K0^{-1}, Q_01^{-1}, ..., K_N^{-1}]`` and
``b = [mu_0; d_0; ...; d_{N-1}; mu_N]`` where ``d_i`` is the drift integral
over interval i. Completing the square gives precision ``Kinv = G^T Q^{-1} G``
(block tridiagonal) and mean ``mu = Kinv^{-1} G^T Q^{-1} b``.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .blocktri import BlockTridiag
from .errors import ConfigError, RankError
from .linsys import drift_integral, grammian, transition_matrix


@dataclass(frozen=True)
class FactorMap:
    """Selects the contiguous knot blocks ``knots`` out of the joint vector."""

    knots: tuple
    state_dim: int

    @property
    def index(self):
        n = self.state_dim
        return np.concatenate([np.arange(k * n, (k + 1) * n) for k in self.knots])

    def gather(self, x):
        return np.asarray(x)[self.index]


@dataclass(frozen=True)
class QuadFactor:
    """``1/2 ||Lam x - target||^2_W`` on the variables picked by ``fmap``.

    ``Psi`` is kept for reference; ``target = Psi @ mu[fmap]``.
    """

    fmap: FactorMap
    Lam: np.ndarray
    Psi: np.ndarray
    W: np.ndarray
    target: np.ndarray
    kind: str = "quadratic"

    def cost(self, x):
        r = self.Lam @ self.fmap.gather(x) - self.target
        return 0.5 * float(r @ self.W @ r)


def _spd_inverse(M, what):
    try:
        L = np.linalg.cholesky(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise RankError(f"{what} is singular or not positive definite") from exc
    Li = np.linalg.inv(L)
    return Li.T @ Li


@dataclass(frozen=True)
class GaussMarkovPrior:
    sys: object
    grid: object
    boundary: tuple
    Phi: np.ndarray
    Q: np.ndarray
    Qinv: np.ndarray
    drift: np.ndarray
    K0inv: np.ndarray
    KNinv: np.ndarray
    Kinv: BlockTridiag
    mu: np.ndarray
    free_mean: np.ndarray

    @property
    def N(self):
        return self.grid.N

    @property
    def state_dim(self):
        return self.sys.state_dim

    @property
    def dim(self):
        return (self.N + 1) * self.state_dim

    @property
    def Qinv_blocks(self):
        return [self.K0inv] + list(self.Qinv) + [self.KNinv]

    @property
    def G(self):
        """Sparse ((N+2)n x (N+1)n) matrix with identity diagonal, -Phi sub-diagonal, trailing identity row."""
        n, N = self.state_dim, self.N
        I = sp.identity(n, format="csr")
        rows = [[None] * (N + 1) for _ in range(N + 2)]
        rows[0][0] = I
        for i in range(N):
            rows[i + 1][i] = sp.csr_matrix(-self.Phi[i])
            rows[i + 1][i + 1] = I
        rows[N + 1][N] = I
        return sp.bmat(rows, format="csr")

    @property
    def b(self):
        mu0, _, muN, _ = self.boundary
        return np.concatenate([mu0] + list(self.drift) + [muN])

    def neg_log_density(self, x):
        """``1/2 ||x - mu||^2_{Kinv}``."""
        d = np.ravel(x) - self.mu
        return 0.5 * self.Kinv.quad(d)


def build_prior(sys, grid, boundary):
    """Assemble the trajectory prior for ``sys`` on ``grid``.

    ``boundary`` is ``(mu0, K0, muN, KN)``.
    """
    mu0, K0, muN, KN = (np.asarray(v, dtype=float) for v in boundary)
    n = sys.state_dim
    if mu0.shape != (n,) or muN.shape != (n,) or K0.shape != (n, n) or KN.shape != (n, n):
        raise ConfigError("boundary dimensions do not match the state dimension")
    K0inv = _spd_inverse(K0, "K0")
    KNinv = _spd_inverse(KN, "KN")
    N = grid.N
    t = grid.knots
    Phi = np.empty((N, n, n))
    Q = np.empty((N, n, n))
    Qinv = np.empty((N, n, n))
    drift = np.empty((N, n))
    for i in range(N):
        Phi[i] = transition_matrix(sys, t[i], t[i + 1], grid.substeps)
        Q[i] = grammian(sys, t[i], t[i + 1], grid.substeps)
        Qinv[i] = _spd_inverse(Q[i], f"Grammian on interval {i} [{t[i]:g}, {t[i + 1]:g}]")
        drift[i] = drift_integral(sys, t[i], t[i + 1], grid.substeps)

    diag = np.zeros((N + 1, n, n))
    lower = np.empty((N, n, n))
    rhs = np.zeros((N + 1, n))
    diag[0] += K0inv
    rhs[0] += K0inv @ mu0
    diag[N] += KNinv
    rhs[N] += KNinv @ muN
    for i in range(N):
        QP = Qinv[i] @ Phi[i]
        diag[i] += Phi[i].T @ QP
        diag[i + 1] += Qinv[i]
        lower[i] = -QP
        rhs[i] -= QP.T @ drift[i]
        rhs[i + 1] += Qinv[i] @ drift[i]
    diag = 0.5 * (diag + np.swapaxes(diag, 1, 2))
    Kinv = BlockTridiag(diag, lower)
    mu = Kinv.solve(rhs.ravel())

    free = np.empty((N + 1, n))
    free[0] = mu0
    for i in range(N):
        free[i + 1] = Phi[i] @ free[i] + drift[i]

    return GaussMarkovPrior(sys, grid, (mu0, K0, muN, KN), Phi, Q, Qinv, drift,
                            K0inv, KNinv, Kinv, mu, free.ravel())


def prior_factors(prior):
    """Split the prior into N+2 quadratic factors centered on ``prior.mu``.

    Unary factors on the end states use ``Lam = Psi = I``; binary factors use
    ``Lam = Psi = [-Phi, I]`` so the factor costs add up to
    ``1/2 ||X - mu||^2_{Kinv}`` exactly.
    """
    n, N = prior.state_dim, prior.N
    mu = prior.mu
    I = np.eye(n)
    out = []
    fm = FactorMap((0,), n)
    out.append(QuadFactor(fm, I, I, prior.K0inv, fm.gather(mu), "unary_start"))
    for i in range(N):
        fm = FactorMap((i, i + 1), n)
        Lam = np.hstack([-prior.Phi[i], I])
        out.append(QuadFactor(fm, Lam, Lam, prior.Qinv[i], Lam @ fm.gather(mu), "binary"))
    fm = FactorMap((N,), n)
    out.append(QuadFactor(fm, I, I, prior.KNinv, fm.gather(mu), "unary_goal"))
    return out


def min_energy_control(sys, dXi, dXj, ti, tj, substeps=200):
    """Minimum-energy open-loop control steering ``dXi`` at ``ti`` to ``dXj`` at ``tj``.

    Returns a callable ``u(t) = B(t)^T Phi(tj, t)^T Q^{-1} (dXj - Phi(tj, ti) dXi)``.
    """
    Qg = grammian(sys, ti, tj, substeps)
    Qi = _spd_inverse(Qg, f"Grammian on [{ti:g}, {tj:g}]")
    r = np.asarray(dXj, dtype=float) - transition_matrix(sys, ti, tj, substeps) @ np.asarray(dXi, dtype=float)
    lam = Qi @ r

    def u(t):
        return sys.B(t).T @ transition_matrix(sys, t, tj, substeps).T @ lam

    return u


def min_energy_energy(sys, dXi, dXj, ti, tj, substeps=200):
    """Control energy ``int ||u||^2 dt`` of the minimum-energy transfer, ``r^T Q^{-1} r``."""
    if not tj > ti:
        raise ValueError("min_energy_energy needs tj > ti")
    Qg = grammian(sys, ti, tj, substeps)
    Qi = _spd_inverse(Qg, f"Grammian on [{ti:g}, {tj:g}]")
    r = np.asarray(dXj, dtype=float) - transition_matrix(sys, ti, tj, substeps) @ np.asarray(dXi, dtype=float)
    return float(r @ Qi @ r)
