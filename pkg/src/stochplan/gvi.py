"""Natural-gradient Gaussian variational inference for trajectory distributions.

The variational family is ``q = N(mu, prec^{-1})`` with ``prec`` block
tridiagonal over the support states. The optimizer minimizes

    F(q) = E_q[psi(X)] / T + 1/2 log det prec

where ``psi`` is the negative log posterior (prior quadratic factors plus
collision factors) and ``T`` is the temperature. One natural-gradient step
moves the precision toward ``E_q[hess psi] / T`` and the mean along
``-prec^{-1} E_q[grad psi] / T``. Every factor depends on a few contiguous
states, so all expectations only need marginal blocks of ``prec^{-1}``.
"""
from dataclasses import dataclass, field

import numpy as np

from .blocktri import BlockTridiag
from .errors import ConfigError
from .gp_prior import FactorMap, QuadFactor, prior_factors
from .quadrature import gh_rule, tensor_points


@dataclass
class GaussianTrajectory:
    """Mean (m*n,) and block-tridiagonal precision of a Gaussian over m states."""

    mu: np.ndarray
    prec: BlockTridiag

    @property
    def state_dim(self):
        return self.prec.n

    @property
    def n_states(self):
        return self.prec.m

    def marginals(self):
        """Per-state covariances (m, n, n) and cross-covariances Sigma[i+1, i] (m-1, n, n)."""
        return self.prec.selinv()

    def means(self):
        return self.mu.reshape(self.n_states, self.state_dim)

    def sample(self, rng, size):
        return self.mu + self.prec.sample(rng, size)


@dataclass(frozen=True)
class NonlinearFactor:
    """Factor with a general cost on the states selected by ``fmap``.

    ``fn`` is batched: it maps an (M, k) array of factor variables to (M,).
    Factors sharing the same ``fn`` are evaluated in one call.
    """

    fmap: FactorMap
    fn: object
    kind: str = "nonlinear"


@dataclass
class GVIConfig:
    eta: float = 0.9
    max_backtrack: int = 10
    T_low: float = 1.0
    T_high: float = 10.0
    n_low: int = None
    iterations: int = 40
    gh_degree: int = 3
    tol: float = 1e-10

    def __post_init__(self):
        if self.n_low is None:
            self.n_low = self.iterations // 2
        if not 0 < self.eta < 1:
            raise ConfigError("eta must lie in (0, 1)")
        if self.max_backtrack < 1 or self.iterations < 1:
            raise ConfigError("max_backtrack and iterations must be >= 1")
        if not (self.T_low > 0 and self.T_high > 0):
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.n_low <= self.iterations:
            raise ConfigError("n_low must lie in [0, iterations]")
        if not 1 <= self.gh_degree <= 20:
            raise ConfigError("gh_degree must lie in [1, 20]")


@dataclass
class CostReport:
    prior: float
    collision: float
    mp: float
    entropy: float
    total: float
    temperature: float = 1.0
    objective: float = float("nan")
    backtracks: int = 0
    accepted: bool = True


# ---------------------------------------------------------------- factor maths


def quad_factor_derivs(Lam, Psi, W, mu_ref, mean, cov):
    """Value, gradient and Hessian in ``mean`` of ``E||Lam X - Psi mu_ref||^2_W``.

    With ``e = Lam mean - Psi mu_ref`` the value is
    ``tr(Lam^T W Lam cov) + e^T W e``, the gradient ``2 Lam^T W e`` and the
    Hessian ``2 Lam^T W Lam`` (the fourth-moment terms of the expectation
    cancel against ``cov^{-1} E[psi]``).
    """
    Lam = np.atleast_2d(Lam)
    Psi = np.atleast_2d(Psi)
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(cov)
    if Lam.shape[1] != mean.size or cov.shape != (mean.size, mean.size) or W.shape[0] != Lam.shape[0]:
        raise ValueError("factor dimensions do not match the marginal")
    e = Lam @ mean - Psi @ np.asarray(mu_ref, dtype=float)
    WL = W @ Lam
    value = float(np.sum(WL * (Lam @ cov)) + e @ W @ e)
    return value, 2.0 * WL.T @ e, 2.0 * Lam.T @ WL


def nl_factor_derivs(cost, mean, cov, rule):
    """GH estimates of ``E[psi]``, ``E[y psi]`` and ``E[y y^T psi]`` with ``y = X - mean``.

    ``cost`` is batched over rows.
    """
    E0, E1, E2, L = _nl_moments(cost, np.asarray(mean, dtype=float)[None], np.asarray(cov, dtype=float)[None], rule)
    L = L[0]
    return E0[0], L @ E1[0], L @ E2[0] @ L.T


def _nl_moments(cost, means, covs, rule):
    """Standardized moments ``E[psi], E[z psi], E[z z^T psi]`` with ``X = L z + mean``.

    Returns arrays over the batch of M marginals.
    """
    M, k = means.shape
    Z, W = tensor_points(rule, k)
    L = np.linalg.cholesky(covs)
    X = means[:, None, :] + np.einsum("mij,pj->mpi", L, Z)
    vals = np.asarray(cost(X.reshape(-1, k)), dtype=float).reshape(M, -1)
    wv = vals * W
    E0 = wv.sum(axis=1)
    E1 = wv @ Z
    E2 = np.einsum("mp,pi,pj->mij", wv, Z, Z)
    return E0, E1, E2, L


def _nl_grad_hess(E0, E1, E2, L):
    """Mean gradient ``S^{-1} E[y psi]`` and Hessian ``S^{-1} E[y y^T psi] S^{-1} - S^{-1} E[psi]``."""
    k = E1.shape[1]
    Linv = np.linalg.inv(L)
    LinvT = np.swapaxes(Linv, 1, 2)
    grad = np.einsum("mij,mj->mi", LinvT, E1)
    inner = E2 - E0[:, None, None] * np.eye(k)
    hess = LinvT @ inner @ Linv
    return grad, 0.5 * (hess + np.swapaxes(hess, 1, 2))


def _factor_marginal(fmap, mu, Sd, Sl):
    knots = fmap.knots
    mean = fmap.gather(mu)
    if len(knots) == 1:
        return mean, Sd[knots[0]]
    i, j = knots
    if j != i + 1:
        raise ConfigError("pairwise factors must couple consecutive states")
    n = Sd.shape[1]
    cov = np.empty((2 * n, 2 * n))
    cov[:n, :n] = Sd[i]
    cov[n:, n:] = Sd[j]
    cov[n:, :n] = Sl[i]
    cov[:n, n:] = Sl[i].T
    return mean, cov


def _scatter(fmap, g, H, grad, Hd, Hl):
    n = Hd.shape[1]
    knots = fmap.knots
    if len(knots) == 1:
        i = knots[0]
        grad[i] += g
        Hd[i] += H
        return
    i, j = knots
    grad[i] += g[:n]
    grad[j] += g[n:]
    Hd[i] += H[:n, :n]
    Hd[j] += H[n:, n:]
    Hl[i] += H[n:, :n]


def _nl_groups(factors):
    groups = {}
    for f in factors:
        if isinstance(f, NonlinearFactor):
            groups.setdefault((id(f.fn), len(f.fmap.knots)), []).append(f)
    return groups.values()


def factor_derivatives(q, factors, rule, with_derivs=True):
    """Total expected cost and (optionally) assembled gradient/Hessian of ``E_q[psi]``.

    Quadratic factors carry a 1/2 in front of their squared norm.
    Returns ``(costs_by_kind, grad (m, n), hess BlockTridiag)``.
    """
    m, n = q.n_states, q.state_dim
    Sd, Sl = q.marginals()
    grad = np.zeros((m, n))
    Hd = np.zeros((m, n, n))
    Hl = np.zeros((max(m - 1, 0), n, n))
    costs = {}
    for f in factors:
        if isinstance(f, QuadFactor):
            mean, cov = _factor_marginal(f.fmap, q.mu, Sd, Sl)
            val, g, H = quad_factor_derivs(f.Lam, np.eye(f.Lam.shape[0]), f.W, f.target, mean, cov)
            costs[f.kind] = costs.get(f.kind, 0.0) + 0.5 * val
            if with_derivs:
                _scatter(f.fmap, 0.5 * g, 0.5 * H, grad, Hd, Hl)
        elif not isinstance(f, NonlinearFactor):
            raise ConfigError(f"unsupported factor type {type(f).__name__}")
    for group in _nl_groups(factors):
        margs = [_factor_marginal(f.fmap, q.mu, Sd, Sl) for f in group]
        means = np.array([mm for mm, _ in margs])
        covs = np.array([c for _, c in margs])
        E0, E1, E2, L = _nl_moments(group[0].fn, means, covs, rule)
        kind = group[0].kind
        costs[kind] = costs.get(kind, 0.0) + float(E0.sum())
        if with_derivs:
            g, H = _nl_grad_hess(E0, E1, E2, L)
            for f, gi, Hi in zip(group, g, H):
                _scatter(f.fmap, gi, Hi, grad, Hd, Hl)
    hess = BlockTridiag(Hd, Hl) if with_derivs else None
    return costs, grad, hess


# ---------------------------------------------------------------- optimizer


def objective(q, factors, T, rule):
    """``E_q[psi] / T + 1/2 log det prec``; ``inf`` if the precision is not PD."""
    if not q.prec.is_pd():
        return float("inf"), {}
    costs, _, _ = factor_derivatives(q, factors, rule, with_derivs=False)
    return sum(costs.values()) / T + 0.5 * q.prec.logdet(), costs


def natural_gradient_step(q, factors, T, rule):
    """Natural-gradient direction ``(dmu, dprec)`` and the current objective."""
    costs, grad, hess = factor_derivatives(q, factors, rule)
    dmu = -q.prec.solve(grad.ravel()) / T
    dprec = hess.scaled(1.0 / T) - q.prec
    cost = sum(costs.values()) / T + 0.5 * q.prec.logdet()
    return dmu, dprec, cost


def backtrack(q, dmu, dprec, eta, max_backtrack, cost_fn, current=None):
    """Try step sizes ``eta**R`` for R = 1..max_backtrack.

    Accepts the first candidate whose precision is PD and whose cost is
    strictly below the incumbent's. Returns ``(q, cost, R, accepted)``; on a
    stall the incumbent comes back with ``accepted=False``.
    """
    if current is None:
        current = cost_fn(q)
    for R in range(1, max_backtrack + 1):
        s = eta**R
        cand = GaussianTrajectory(q.mu + s * dmu, (q.prec + dprec.scaled(s)).symmetrized())
        if not cand.prec.is_pd():
            continue
        c = cost_fn(cand)
        if c < current:
            return cand, c, R, True
    return q, current, max_backtrack, False


def cost_report(q, prior, factors, rule, T=1.0):
    """Prior/collision/MP expected costs, log det precision and their total."""
    costs, _, _ = factor_derivatives(q, factors, rule, with_derivs=False)
    pr = sum(v for k, v in costs.items() if k in ("unary_start", "binary", "unary_goal"))
    col = sum(v for k, v in costs.items() if k not in ("unary_start", "binary", "unary_goal"))
    ent = q.prec.logdet()
    mp = pr + col
    return CostReport(pr, col, mp, ent, mp + ent, T, mp / T + 0.5 * ent)


def collision_factors(model, n_states, state_dim):
    """One unary collision factor per support state."""
    fn = model.cost_batch
    return [NonlinearFactor(FactorMap((i,), state_dim), fn, "collision") for i in range(n_states)]


def initial_trajectory(prior, waypoints=None):
    """Piecewise-linear positions through ``waypoints`` with zero velocities, precision ``Kinv``.

    Without waypoints the path is the straight line between the boundary means.
    """
    mu0, _, muN, _ = prior.boundary
    n, m = prior.state_dim, prior.N + 1
    dof = n // 2
    pts = [mu0[:dof]] + [np.asarray(w, dtype=float) for w in (waypoints or [])] + [muN[:dof]]
    pts = np.array(pts)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s = s / s[-1] if s[-1] > 0 else np.linspace(0, 1, len(pts))
    u = np.linspace(0.0, 1.0, m)
    X = np.zeros((m, n))
    for j in range(dof):
        X[:, j] = np.interp(u, s, pts[:, j])
    return GaussianTrajectory(X.ravel(), prior.Kinv.copy())


@dataclass
class GVIResult:
    q: GaussianTrajectory
    history: list = field(default_factory=list)
    switched_at: int = None
    stopped: str = ""


def gvi_solve(prior, model, cfg=None, q0=None):
    """Two-phase (low then high temperature) natural-gradient GVI.

    After ``cfg.n_low`` iterations, or earlier if the low phase converges or
    stalls twice, the precision is reset to the prior precision and the
    temperature raised to ``cfg.T_high``.
    """
    cfg = cfg or GVIConfig()
    rule = gh_rule(cfg.gh_degree)
    m, n = prior.N + 1, prior.state_dim
    if model is not None and model.robot.dof * 2 != n:
        raise ConfigError("robot dof does not match the prior state dimension")
    factors = list(prior_factors(prior))
    if model is not None:
        factors += collision_factors(model, m, n)
    q = q0 if q0 is not None else initial_trajectory(prior)
    if q.mu.shape != (m * n,) or q.prec.m != m or q.prec.n != n:
        raise ConfigError("initial distribution does not match the prior dimensions")

    res = GVIResult(q)
    T = cfg.T_low
    high = cfg.n_low == 0
    if high:
        T = cfg.T_high
        q = GaussianTrajectory(q.mu, prior.Kinv.copy())
        res.switched_at = 0
    rep = cost_report(q, prior, factors, rule, T)
    res.history.append(rep)
    stalls = 0

    def cost_fn(cand):
        return objective(cand, factors, T, rule)[0]

    for it in range(cfg.iterations):
        if not high and it >= cfg.n_low:
            high = True
        if high and T != cfg.T_high:
            T = cfg.T_high
            q = GaussianTrajectory(q.mu, prior.Kinv.copy())
            res.switched_at = it
            stalls = 0
        dmu, dprec, cur = natural_gradient_step(q, factors, T, rule)
        q_new, c_new, R, ok = backtrack(q, dmu, dprec, cfg.eta, cfg.max_backtrack, cost_fn, cur)
        rep = cost_report(q_new, prior, factors, rule, T)
        rep.backtracks, rep.accepted = R, ok
        res.history.append(rep)
        converged = False
        if ok:
            stalls = 0
            converged = cur - c_new < cfg.tol * max(1.0, abs(cur))
        else:
            stalls += 1
            converged = stalls >= 2
        q = q_new
        if converged:
            if high:
                res.stopped = "converged" if ok else "stalled"
                break
            high = True
    else:
        res.stopped = "budget"
    res.q = q
    return res
