"""Proximal-gradient covariance steering with a nonlinear collision cost.

Each outer iteration linearizes the state cost around the current nominal
mean, mixes the current closed-loop system with the prior system, and solves
one linear covariance steering problem. The resulting closed loop becomes the
next iterate. All trajectories live on one uniform fine grid.
"""
from dataclasses import dataclass, field

import numpy as np

from . import covsteer, kernels
from .errors import ConfigError, SolverFailure
from .linsys import TimeGrid


@dataclass
class PGCSConfig:
    iterations: int = 30
    epsilon: float = 0.1
    eta: float = 50.0
    beta: float = 0.5
    max_backtrack: int = 8
    tol: float = 1e-6
    param_tol: float = 1e-9
    knots: int = 50
    substeps: int = 10

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        if self.iterations < 1 or self.max_backtrack < 1 or self.substeps < 1:
            raise ConfigError("iteration counts must be >= 1")
        if self.knots < 2:
            raise ConfigError("need at least two support states")
        if not (self.epsilon > 0 and self.eta > 0):
            raise ConfigError("epsilon and eta must be positive")


@dataclass
class PGCSIterate:
    A: np.ndarray
    a: np.ndarray
    z: np.ndarray
    Sigma: np.ndarray
    V: float
    eta: float = float("nan")
    backtracks: int = 0
    decreased: bool = True


@dataclass
class PGCSResult:
    solution: covsteer.SteeringSolution
    history: list = field(default_factory=list)
    times: np.ndarray = None
    knot_index: np.ndarray = None
    stopped: str = ""
    failed: bool = False
    message: str = ""


def trajectory_cost(model, times, z):
    """Trapezoidal integral of the collision cost along the nominal mean."""
    if model is None:
        return 0.0
    return float(np.trapezoid(model.cost_batch(z), times)) if hasattr(np, "trapezoid") \
        else float(np.trapz(model.cost_batch(z), times))


def quad_approx_cost(model, z):
    """``(V, grad V, Gauss-Newton hess V)`` at each row of ``z``."""
    z = np.atleast_2d(z)
    if model is None:
        M, n = z.shape
        return np.zeros(M), np.zeros((M, n)), np.zeros((M, n, n))
    return model.grad_batch(z)


def compute_Qr(Ak, ak, zk, A, a, B, eta, model):
    """Mixed system and quadratic cost of one proximal step.

    ``Abar = (Ak + eta A)/(1+eta)``, ``abar`` likewise;
    ``Q = eta/(1+eta) hess V + eta/(1+eta)^2 D^T (BB^T)^+ D`` with ``D = Ak - A``;
    ``r = eta/(1+eta) (grad V - hess V z) + eta/(1+eta)^2 D^T (BB^T)^+ (ak - a)``.
    The third-derivative trace term vanishes for the Gauss-Newton Hessian.
    """
    c1 = eta / (1.0 + eta)
    c2 = eta / (1.0 + eta) ** 2
    Abar = (Ak + eta * A) / (1.0 + eta)
    abar = (ak + eta * a) / (1.0 + eta)
    _, g, H = quad_approx_cost(model, zk)
    D = Ak - A
    Wp = np.linalg.pinv(B @ np.swapaxes(B, 1, 2), rcond=1e-10, hermitian=True)
    DtW = np.swapaxes(D, 1, 2) @ Wp
    Q = c1 * H + c2 * DtW @ D
    r = c1 * (g - np.einsum("kij,kj->ki", H, zk)) + c2 * np.einsum("kij,kj->ki", DtW, ak - a)
    return Abar, abar, 0.5 * (Q + np.swapaxes(Q, 1, 2)), r


def propagate_nominal(times, A, a, B, mu0, K0, epsilon):
    """Mean and covariance of the uncontrolled process ``dx = (A x + a) dt + sqrt(eps) B dW``."""
    z = kernels.linear_ode(A, a, mu0, times)
    Sig = kernels.lyapunov_ode(A, epsilon * (B @ np.swapaxes(B, 1, 2)), np.asarray(K0, dtype=float), times)
    return z, Sig


def pgcs_step(it, A, a, B, times, boundary, eta, model, epsilon):
    """One proximal step from iterate ``it`` with step size ``eta``."""
    mu0, K0, muT, KT = boundary
    Abar, abar, Q, r = compute_Qr(it.A, it.a, it.z, A, a, B, eta, model)
    prob = covsteer.SteeringProblem(times, Abar, abar, B, epsilon, mu0, K0, muT, KT, Q, r)
    sol = covsteer.solve(prob)
    # the closed loop keeps the mixed drift: A_{k+1} = Abar + B K, a_{k+1} = abar + B d
    V = trajectory_cost(model, times, sol.mean)
    return PGCSIterate(sol.A_cl, sol.a_cl, sol.mean, sol.cov, V, eta), sol


def pgcs_solve(sys, T, boundary, model, cfg=None):
    """Run the outer proximal-gradient loop with backtracking on the step size."""
    cfg = cfg or PGCSConfig()
    if model is not None and 2 * model.robot.dof != sys.state_dim:
        raise ConfigError("robot dof does not match the system state dimension")
    mu0, K0, muT, KT = (np.asarray(v, dtype=float) for v in boundary)
    boundary = (mu0, K0, muT, KT)
    grid = TimeGrid.uniform(0.0, T, cfg.knots - 1, cfg.substeps)
    times = grid.fine
    A, a, B = sys.sample(times)
    z, Sig = propagate_nominal(times, A, a, B, mu0, K0, cfg.epsilon)
    it = PGCSIterate(A.copy(), a.copy(), z, Sig, trajectory_cost(model, times, z))
    res = PGCSResult(None, [it], times, np.arange(cfg.knots) * cfg.substeps)
    best_sol = None
    for _ in range(cfg.iterations):
        eta = cfg.eta
        try:
            for j in range(1, cfg.max_backtrack + 1):
                cand, sol = pgcs_step(it, A, a, B, times, boundary, eta, model, cfg.epsilon)
                cand.backtracks = j
                decreased = cand.V < it.V or (cand.V == 0.0 and it.V == 0.0)
                if decreased or j == cfg.max_backtrack:
                    cand.decreased = decreased
                    break
                eta *= cfg.beta
        except (SolverFailure, np.linalg.LinAlgError, ArithmeticError) as exc:
            res.failed = True
            res.message = f"iteration {len(res.history)}: {exc}"
            break
        prev = it
        it = cand
        best_sol = sol
        res.history.append(it)
        dV = prev.V - it.V
        step = np.linalg.norm(it.A - prev.A) + np.linalg.norm(it.a - prev.a)
        scale = 1.0 + np.linalg.norm(it.A) + np.linalg.norm(it.a)
        if 0 < dV < cfg.tol or (it.V == 0.0 and step < cfg.param_tol * scale):
            res.stopped = "converged"
            break
    else:
        res.stopped = "budget"
    if best_sol is None:
        if res.failed:
            raise SolverFailure(res.message)
        raise SolverFailure("no proximal step was taken")
    # report the policy relative to the base system: A_cl = A + B K, a_cl = a + B d
    Bp = np.linalg.pinv(B)
    best_sol.gain = Bp @ (best_sol.A_cl - A)
    best_sol.feedforward = np.einsum("kij,kj->ki", Bp, best_sol.a_cl - a)
    res.solution = best_sol
    return res


# ---------------------------------------------------------------- diagnostics


def _interval_transitions(times, A, a, C, idx):
    """Per-knot-interval transition matrices, offsets and noise covariances."""
    n = A.shape[1]
    out = []
    for i0, i1 in zip(idx[:-1], idx[1:]):
        t = times[i0:i1 + 1]
        Phi = kernels.linear_ode(A[i0:i1 + 1], None, np.eye(n), t)[-1]
        c = kernels.linear_ode(A[i0:i1 + 1], a[i0:i1 + 1], np.zeros(n), t)[-1]
        S = kernels.lyapunov_ode(A[i0:i1 + 1], C[i0:i1 + 1], np.zeros((n, n)), t)[-1]
        out.append((Phi, c, 0.5 * (S + S.T)))
    return out


def knot_kl(times, knot_index, A_cl, a_cl, A, a, B, z, Sigma, epsilon):
    """Sum over knot intervals of ``E_x KL(p_cl(.|x) || p_prior(.|x))`` for Gaussian transitions."""
    C = epsilon * (B @ np.swapaxes(B, 1, 2))
    tc = _interval_transitions(times, A_cl, a_cl, C, knot_index)
    tp = _interval_transitions(times, A, a, C, knot_index)
    total = 0.0
    for k, ((Pc, cc, Sc), (Pp, cp, Sp)) in enumerate(zip(tc, tp)):
        i = knot_index[k]
        Spi = np.linalg.inv(Sp)
        n = Sp.shape[0]
        Dm = Pc - Pp
        dm = Dm @ z[i] + cc - cp
        quad = dm @ Spi @ dm + np.trace(Dm.T @ Spi @ Dm @ Sigma[i])
        total += 0.5 * (np.trace(Spi @ Sc) - n + quad
                        + np.linalg.slogdet(Sp)[1] - np.linalg.slogdet(Sc)[1])
    return total


def control_energy_mc(times, A_cl, a_cl, A, a, B, mu0, K0, epsilon, n_samples, seed):
    """Monte Carlo ``1/(2 eps) E int ||u||^2 dt`` with ``u = B^+ ((A_cl - A) x + a_cl - a)``.

    The closed loop is simulated with Euler-Maruyama on ``times``.
    """
    rng = np.random.default_rng(seed)
    n = A.shape[1]
    Bp = np.linalg.pinv(B)
    L0 = np.linalg.cholesky(K0)
    x = mu0 + rng.standard_normal((n_samples, n)) @ L0.T
    energy = np.zeros(n_samples)
    h = np.diff(times)
    se = np.sqrt(epsilon)
    prev = None
    for k in range(times.size):
        u = x @ (Bp[k] @ (A_cl[k] - A[k])).T + Bp[k] @ (a_cl[k] - a[k])
        un = np.sum(u * u, axis=1)
        if prev is not None:
            energy += 0.5 * h[k - 1] * (prev + un)
        prev = un
        if k == times.size - 1:
            break
        dW = rng.standard_normal((n_samples, B.shape[2])) * np.sqrt(h[k])
        x = x + h[k] * (x @ A_cl[k].T + a_cl[k]) + se * dW @ B[k].T
    return float(energy.mean() / (2.0 * epsilon)), float(energy.std(ddof=1) / (2.0 * epsilon) / np.sqrt(n_samples))
