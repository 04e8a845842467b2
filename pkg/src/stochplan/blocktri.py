"""Symmetric block-tridiagonal matrices (precision matrices of Markov chains)."""
import numpy as np

from . import kernels
from .errors import FactorizationError


class BlockTridiag:
    """Symmetric matrix stored by its diagonal and first sub-diagonal blocks.

    ``diag`` has shape (m, n, n); ``lower[i]`` is the block at (i+1, i).
    The Cholesky factor is computed lazily and cached; instances are meant to
    be treated as immutable once built.
    """

    def __init__(self, diag, lower):
        self.diag = np.ascontiguousarray(diag, dtype=float)
        m, n, _ = self.diag.shape
        self.lower = np.ascontiguousarray(lower, dtype=float).reshape(max(m - 1, 0), n, n)
        self._chol = None

    @property
    def m(self):
        return self.diag.shape[0]

    @property
    def n(self):
        return self.diag.shape[1]

    @property
    def size(self):
        return self.m * self.n

    @classmethod
    def from_dense(cls, M, n):
        m = M.shape[0] // n
        diag = np.array([M[i * n:(i + 1) * n, i * n:(i + 1) * n] for i in range(m)])
        lower = np.array([M[(i + 1) * n:(i + 2) * n, i * n:(i + 1) * n] for i in range(m - 1)])
        return cls(diag, lower.reshape(m - 1, n, n))

    def to_dense(self):
        m, n = self.m, self.n
        M = np.zeros((m * n, m * n))
        for i in range(m):
            M[i * n:(i + 1) * n, i * n:(i + 1) * n] = self.diag[i]
        for i in range(m - 1):
            M[(i + 1) * n:(i + 2) * n, i * n:(i + 1) * n] = self.lower[i]
            M[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = self.lower[i].T
        return M

    def copy(self):
        return BlockTridiag(self.diag.copy(), self.lower.copy())

    def __add__(self, other):
        return BlockTridiag(self.diag + other.diag, self.lower + other.lower)

    def __sub__(self, other):
        return BlockTridiag(self.diag - other.diag, self.lower - other.lower)

    def scaled(self, c):
        return BlockTridiag(c * self.diag, c * self.lower)

    def symmetrized(self):
        return BlockTridiag(0.5 * (self.diag + np.swapaxes(self.diag, 1, 2)), self.lower)

    def fro_norm(self):
        return np.sqrt(np.sum(self.diag**2) + 2.0 * np.sum(self.lower**2))

    def max_asymmetry(self):
        return float(np.max(np.abs(self.diag - np.swapaxes(self.diag, 1, 2))))

    def matvec(self, x):
        x = np.asarray(x, dtype=float).reshape(self.m, self.n)
        y = np.einsum("kij,kj->ki", self.diag, x)
        y[1:] += np.einsum("kij,kj->ki", self.lower, x[:-1])
        y[:-1] += np.einsum("kji,kj->ki", self.lower, x[1:])
        return y.ravel()

    def quad(self, x):
        return float(np.dot(np.ravel(x), self.matvec(x)))

    def cholesky(self):
        if self._chol is None:
            self._chol = kernels.bt_cholesky(self.diag, self.lower)
        return self._chol

    def is_pd(self):
        try:
            self.cholesky()
        except FactorizationError:
            return False
        return True

    def solve(self, b):
        Ld, Ll = self.cholesky()
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return kernels.bt_solve(Ld, Ll, b.reshape(self.m, self.n)).ravel()
        return kernels.bt_solve(Ld, Ll, b)

    def logdet(self):
        Ld, _ = self.cholesky()
        return 2.0 * float(np.sum(np.log(np.einsum("kii->ki", Ld))))

    def selinv(self):
        """Diagonal and sub-diagonal blocks of the inverse."""
        Ld, Ll = self.cholesky()
        return kernels.bt_selinv(Ld, Ll)

    def sample(self, rng, size):
        """Draw ``size`` zero-mean samples with covariance equal to the inverse of this matrix."""
        Ld, Ll = self.cholesky()
        z = rng.standard_normal((self.m, self.n, size))
        return kernels.bt_solve_upper(Ld, Ll, z).reshape(self.size, size).T
