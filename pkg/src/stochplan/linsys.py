"""Linear time-varying systems, transition matrices and Grammians.

All integration here uses Heun's method (explicit trapezoid). A system tagged
``kind="constant_velocity"`` short-circuits to the exact closed forms.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalDomainError

DEFAULT_SUBSTEPS = 10


@dataclass(frozen=True)
class LTVSystem:
    """``dX = A X dt + a dt + B (u dt + sqrt(epsilon) dW)``.

    ``A``, ``a`` and ``B`` are callables of time. ``kind`` tags systems that
    admit closed-form transition matrices and Grammians.
    """

    state_dim: int
    control_dim: int
    A: Callable[[float], np.ndarray]
    a: Callable[[float], np.ndarray]
    B: Callable[[float], np.ndarray]
    epsilon: float = 1.0
    kind: str = "generic"

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ConfigError("state_dim and control_dim must be positive")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be nonnegative")

    def sample(self, times):
        """Stack ``A``, ``a``, ``B`` evaluated on ``times``."""
        times = np.asarray(times, dtype=float)
        A = np.array([self.A(t) for t in times], dtype=float).reshape(-1, self.state_dim, self.state_dim)
        a = np.array([self.a(t) for t in times], dtype=float).reshape(-1, self.state_dim)
        B = np.array([self.B(t) for t in times], dtype=float).reshape(-1, self.state_dim, self.control_dim)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(a)) and np.all(np.isfinite(B))):
            raise NumericalDomainError("system matrices are not finite on the requested times")
        return A, a, B

    def with_epsilon(self, epsilon):
        return LTVSystem(self.state_dim, self.control_dim, self.A, self.a, self.B, epsilon, self.kind)

    def as_generic(self):
        """Same system without the closed-form tag (forces numerical integration)."""
        return LTVSystem(self.state_dim, self.control_dim, self.A, self.a, self.B, self.epsilon, "generic")

    @property
    def dof(self):
        return self.state_dim // 2


@dataclass(frozen=True)
class TimeGrid:
    """Knot times plus a uniform refinement with ``substeps`` per interval."""

    t0: float
    tN: float
    knots: np.ndarray
    substeps: int = DEFAULT_SUBSTEPS

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", k)
        if k.ndim != 1 or k.size < 2:
            raise ConfigError("a time grid needs at least two knots")
        if not np.all(np.diff(k) > 0):
            raise ConfigError("knots must be strictly increasing")
        if not (np.isclose(k[0], self.t0) and np.isclose(k[-1], self.tN)):
            raise ConfigError("knots must start at t0 and end at tN")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    @classmethod
    def uniform(cls, t0, tN, n_intervals, substeps=DEFAULT_SUBSTEPS):
        return cls(t0, tN, np.linspace(t0, tN, n_intervals + 1), substeps)

    @property
    def N(self):
        return self.knots.size - 1

    @property
    def fine(self):
        """Fine grid; knot ``i`` sits at index ``i * substeps``."""
        segs = [np.linspace(self.knots[i], self.knots[i + 1], self.substeps + 1)[:-1] for i in range(self.N)]
        return np.concatenate(segs + [self.knots[-1:]])


def heun_step(f, y, t, h):
    """One Heun step ``y + h/2 (f(t, y) + f(t + h, y + h f(t, y)))``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(f(t, y), dtype=float)
    if not np.all(np.isfinite(k1)):
        raise NumericalDomainError("non-finite vector field at the step start")
    k2 = np.asarray(f(t + h, y + h * k1), dtype=float)
    out = y + 0.5 * h * (k1 + k2)
    if not (np.all(np.isfinite(k2)) and np.all(np.isfinite(out))):
        raise NumericalDomainError("non-finite value in Heun step")
    return out


def _cv_blocks(dt, dof):
    I = np.eye(dof)
    Phi = np.block([[I, dt * I], [np.zeros((dof, dof)), I]])
    Q = np.block([[dt**3 / 3 * I, dt**2 / 2 * I], [dt**2 / 2 * I, dt * I]])
    return Phi, Q


def transition_matrix(sys, s, t, substeps=DEFAULT_SUBSTEPS):
    """State transition matrix ``Phi(t, s)`` with ``t >= s``."""
    if t < s:
        raise ValueError("transition_matrix needs t >= s")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    n = sys.state_dim
    if t == s:
        return np.eye(n)
    if sys.kind == "constant_velocity":
        return _cv_blocks(t - s, sys.dof)[0]
    times = np.linspace(s, t, substeps + 1)
    A, _, _ = sys.sample(times)
    return kernels.linear_ode(A, None, np.eye(n), times)[-1]


def grammian(sys, ti, tj, substeps=DEFAULT_SUBSTEPS):
    """Controllability Grammian ``int_ti^tj Phi(tj,s) B B^T Phi(tj,s)^T ds`` (no epsilon)."""
    if not tj > ti:
        raise ValueError("grammian needs tj > ti")
    if sys.kind == "constant_velocity":
        return _cv_blocks(tj - ti, sys.dof)[1]
    times = np.linspace(ti, tj, substeps + 1)
    A, _, B = sys.sample(times)
    BBt = B @ np.swapaxes(B, 1, 2)
    Q = kernels.lyapunov_ode(A, BBt, np.zeros((sys.state_dim, sys.state_dim)), times)[-1]
    return 0.5 * (Q + Q.T)


def drift_integral(sys, ti, tj, substeps=DEFAULT_SUBSTEPS):
    """``int_ti^tj Phi(tj,s) a_s ds`` (mean displacement from a zero start)."""
    if not tj > ti:
        raise ValueError("drift_integral needs tj > ti")
    times = np.linspace(ti, tj, substeps + 1)
    A, a, _ = sys.sample(times)
    if not np.any(a):
        return np.zeros(sys.state_dim)
    return kernels.linear_ode(A, a, np.zeros(sys.state_dim), times)[-1]


def constant_velocity_system(dof, epsilon=1.0):
    """Double integrator per axis: ``A = [[0, I], [0, 0]]``, ``a = 0``, ``B = [0; I]``."""
    if dof < 1:
        raise ConfigError("dof must be >= 1")
    n = 2 * dof
    A = np.zeros((n, n))
    A[:dof, dof:] = np.eye(dof)
    B = np.zeros((n, dof))
    B[dof:] = np.eye(dof)
    a = np.zeros(n)
    A.flags.writeable = False
    B.flags.writeable = False
    a.flags.writeable = False
    return LTVSystem(n, dof, lambda t: A, lambda t: a, lambda t: B, epsilon, "constant_velocity")


def planar_quadrotor_field(state, control, mass, inertia, arm, gravity):
    """Right-hand side of the 6-state planar quadrotor ``[px, pz, phi, vx, vz, phidot]``."""
    _, _, phi, vx, vz, dphi = state
    c, s = np.cos(phi), np.sin(phi)
    u1, u2 = control
    return np.array([
        vx * c - vz * s,
        vx * s + vz * c,
        dphi,
        vz * dphi - gravity * s,
        -vx * dphi - gravity * c + (u1 + u2) / mass,
        arm / inertia * (u1 - u2),
    ])


def linearize_planar_quadrotor(nominal_state, mass, inertia, arm, gravity=9.81):
    """Jacobians ``(A, B)`` of the planar quadrotor at ``nominal_state``."""
    if not (mass > 0 and inertia > 0):
        raise ConfigError("mass and inertia must be positive")
    _, _, phi, vx, vz, dphi = np.asarray(nominal_state, dtype=float)
    c, s = np.cos(phi), np.sin(phi)
    A = np.zeros((6, 6))
    A[0, 2:5] = [-vx * s - vz * c, c, -s]
    A[1, 2:5] = [vx * c - vz * s, s, c]
    A[2, 5] = 1.0
    A[3, 2:6] = [-gravity * c, 0.0, dphi, vz]
    A[4, 2:6] = [gravity * s, -dphi, 0.0, -vx]
    B = np.zeros((6, 2))
    B[4] = [1.0 / mass, 1.0 / mass]
    B[5] = [arm / inertia, -arm / inertia]
    return A, B
