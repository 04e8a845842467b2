"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_ckernels`` module. :mod:`stochplan.kernels` picks one at import time.

Time-indexed inputs are stacked along axis 0 and sampled on ``times``; the
Heun scheme only ever evaluates coefficients at grid nodes.
"""
import numpy as np
from scipy.linalg import solve_triangular

from .errors import FactorizationError, NumericalDomainError


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalDomainError(f"non-finite value in {where}")


def linear_ode(A, F, X0, times, backward=False):
    """Heun integration of ``dX/dt = A(t) X + F(t)``.

    ``X0`` is the value at ``times[0]`` (forward) or ``times[-1]``
    (backward). ``F`` may be None. Returns the solution at every node.
    """
    K = len(times) - 1
    X0 = np.asarray(X0, dtype=float)
    out = np.empty((K + 1,) + X0.shape)
    if backward:
        out[K] = X0
        for k in range(K, 0, -1):
            h = times[k - 1] - times[k]
            x = out[k]
            f1 = A[k] @ x
            if F is not None:
                f1 = f1 + F[k]
            xp = x + h * f1
            f2 = A[k - 1] @ xp
            if F is not None:
                f2 = f2 + F[k - 1]
            out[k - 1] = x + 0.5 * h * (f1 + f2)
    else:
        out[0] = X0
        for k in range(K):
            h = times[k + 1] - times[k]
            x = out[k]
            f1 = A[k] @ x
            if F is not None:
                f1 = f1 + F[k]
            xp = x + h * f1
            f2 = A[k + 1] @ xp
            if F is not None:
                f2 = f2 + F[k + 1]
            out[k + 1] = x + 0.5 * h * (f1 + f2)
    _check(out, "linear_ode")
    return out


def lyapunov_ode(A, C, S0, times):
    """Heun integration of ``dS/dt = A S + S A^T + C`` forward from ``S0``."""
    K = len(times) - 1
    out = np.empty((K + 1,) + np.shape(S0))
    out[0] = S0
    for k in range(K):
        h = times[k + 1] - times[k]
        S = out[k]
        AS = A[k] @ S
        f1 = AS + AS.T + C[k]
        Sp = S + h * f1
        ASp = A[k + 1] @ Sp
        f2 = ASp + ASp.T + C[k + 1]
        Sn = S + 0.5 * h * (f1 + f2)
        out[k + 1] = 0.5 * (Sn + Sn.T)
    _check(out, "lyapunov_ode")
    return out


def riccati_backward(A, BBt, Q, PT, times):
    """Heun integration of ``-dP/dt = A^T P + P A - P BBt P + Q`` backward from ``PT``."""
    K = len(times) - 1
    out = np.empty((K + 1,) + np.shape(PT))
    out[K] = PT
    for k in range(K, 0, -1):
        h = times[k] - times[k - 1]
        P = out[k]
        PA = P @ A[k]
        g1 = PA + PA.T - P @ BBt[k] @ P + Q[k]
        Pp = P + h * g1
        PAp = Pp @ A[k - 1]
        g2 = PAp + PAp.T - Pp @ BBt[k - 1] @ Pp + Q[k - 1]
        Pn = P + 0.5 * h * (g1 + g2)
        out[k - 1] = 0.5 * (Pn + Pn.T)
    _check(out, "riccati_backward")
    return out


def _chol(S, i):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"block {i} is not positive definite") from exc


def bt_cholesky(diag, lower):
    """Block Cholesky of a symmetric block-tridiagonal matrix.

    ``lower[i]`` is the block at (i+1, i). Returns ``(Ld, Ll)`` with
    lower-triangular diagonal factors and sub-diagonal factor blocks.
    """
    m = diag.shape[0]
    Ld = np.empty_like(diag)
    Ll = np.empty_like(lower)
    Ld[0] = _chol(diag[0], 0)
    for i in range(m - 1):
        # Ll_i = J[i+1,i] L_ii^{-T}
        Ll[i] = solve_triangular(Ld[i], lower[i].T, lower=True).T
        S = diag[i + 1] - Ll[i] @ Ll[i].T
        Ld[i + 1] = _chol(S, i + 1)
    return Ld, Ll


def bt_solve(Ld, Ll, b):
    """Solve ``L L^T x = b`` with ``b`` shaped (m, n) or (m, n, k)."""
    m = Ld.shape[0]
    y = np.empty_like(b, dtype=float)
    y[0] = solve_triangular(Ld[0], b[0], lower=True)
    for i in range(m - 1):
        y[i + 1] = solve_triangular(Ld[i + 1], b[i + 1] - Ll[i] @ y[i], lower=True)
    return bt_solve_upper(Ld, Ll, y)


def bt_solve_upper(Ld, Ll, y):
    """Solve ``L^T x = y`` (back substitution only)."""
    m = Ld.shape[0]
    x = np.empty_like(y, dtype=float)
    x[m - 1] = solve_triangular(Ld[m - 1], y[m - 1], lower=True, trans="T")
    for i in range(m - 2, -1, -1):
        x[i] = solve_triangular(Ld[i], y[i] - Ll[i].T @ x[i + 1], lower=True, trans="T")
    return x


def bt_selinv(Ld, Ll):
    """Diagonal and first sub-diagonal blocks of ``(L L^T)^{-1}``."""
    m, n, _ = Ld.shape
    Sd = np.empty_like(Ld)
    Sl = np.empty_like(Ll)
    eye = np.eye(n)
    Linv = solve_triangular(Ld[m - 1], eye, lower=True)
    Sd[m - 1] = Linv.T @ Linv
    for i in range(m - 2, -1, -1):
        Linv = solve_triangular(Ld[i], eye, lower=True)
        # Sigma[i+1,i] = -Sigma[i+1,i+1] Ll_i L_ii^{-1}
        Sl[i] = -Sd[i + 1] @ Ll[i] @ Linv
        Sdi = Linv.T @ (Linv - Ll[i].T @ Sl[i])
        Sd[i] = 0.5 * (Sdi + Sdi.T)
    return Sd, Sl
