import numpy as np
import pytest

from stochplan.gp_prior import build_prior
from stochplan.linsys import TimeGrid, constant_velocity_system


def small_prior(N=4, dof=1, T=1.0, K=0.1, start=None, goal=None):
    sys_ = constant_velocity_system(dof)
    n = 2 * dof
    mu0 = np.zeros(n) if start is None else np.asarray(start, float)
    muN = np.r_[np.ones(dof), np.zeros(dof)] if goal is None else np.asarray(goal, float)
    grid = TimeGrid.uniform(0.0, T, N)
    return build_prior(sys_, grid, (mu0, K * np.eye(n), muN, K * np.eye(n)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
