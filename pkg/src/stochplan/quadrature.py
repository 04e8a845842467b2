"""Gauss-Hermite quadrature for expectations under Gaussians.

Probabilists' convention: nodes are roots of ``He_p`` and the rule integrates
against the standard normal density, so ``E[f(X)]`` with ``X ~ N(m, P)`` is
``sum_l W_l f(chol(P) xi_l + m)``.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e

from .errors import CapacityError, FactorizationError

MAX_POINTS = 10**7


@dataclass(frozen=True)
class GHRule:
    p: int
    sigma_points: np.ndarray
    weights: np.ndarray


def gh_rule(p):
    """p-point rule from the eigenvalues of the Jacobi matrix of ``He_p``.

    Weights are ``p! / (p^2 He_{p-1}(xi)^2)``.
    """
    if not (isinstance(p, (int, np.integer)) and 1 <= p <= 20):
        raise ValueError("Gauss-Hermite degree must be an integer in [1, 20]")
    off = np.sqrt(np.arange(1, p))
    J = np.diag(off, 1) + np.diag(off, -1)
    xi = np.linalg.eigvalsh(J)
    # enforce exact symmetry of the nodes
    xi = 0.5 * (xi - xi[::-1])
    if p % 2 == 1:
        xi[p // 2] = 0.0
    coef = np.zeros(p)
    coef[p - 1] = 1.0
    Hm1 = hermite_e.hermeval(xi, coef)
    w = math.factorial(p) / (p**2 * Hm1**2)
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    xi.flags.writeable = False
    w.flags.writeable = False
    return GHRule(p, xi, w)


def tensor_points(rule, n):
    """Tensor-product nodes (p^n, n) and weights (p^n,) for dimension ``n``."""
    count = rule.p**n
    if count > MAX_POINTS:
        raise CapacityError(
            f"{rule.p}^{n} = {count} quadrature points exceeds the budget of {MAX_POINTS}; "
            "evaluate the expectation per factor instead")
    Z = np.array(list(itertools.product(rule.sigma_points, repeat=n))).reshape(count, n)
    W = np.prod(np.array(list(itertools.product(rule.weights, repeat=n))).reshape(count, n), axis=1)
    return Z, W


def _chol(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError("covariance is not positive definite") from exc


def gh_expect(rule, phi, mean, cov, batched=False):
    """``E[phi(X)]`` for ``X ~ N(mean, cov)``.

    ``phi`` maps a vector to a scalar or array. With ``batched=True`` it
    receives all nodes at once as an (M, n) array and returns (M, ...).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = mean.size
    Z, W = tensor_points(rule, n)
    X = Z @ _chol(cov).T + mean
    if batched:
        vals = np.asarray(phi(X), dtype=float)
    else:
        vals = np.array([np.asarray(phi(x), dtype=float) for x in X])
    return np.tensordot(W, vals, axes=(0, 0))
