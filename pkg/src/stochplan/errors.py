"""Exception types raised across the package."""
import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or inconsistent dimensions."""


class NumericalDomainError(ArithmeticError):
    """A quantity became non-finite during integration or evaluation."""


class RankError(np.linalg.LinAlgError):
    """A matrix that must be invertible is singular (e.g. uncontrollable interval)."""


class FactorizationError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed to factorize."""


class CapacityError(RuntimeError):
    """A quadrature request exceeds the sigma-point budget."""


class SolverFailure(RuntimeError):
    """An iterative or boundary-value solver could not produce a solution."""
