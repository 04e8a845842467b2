"""Signed distance fields, sphere-based robot geometry and hinge collision costs."""
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError

# Stand-in distance for grids generated without any obstacle.
FREE_SPACE_DISTANCE = 1.0e3


class SignedDistanceField:
    """Regular grid of signed distances (positive outside obstacles).

    ``grid[i, j(, k)]`` is the distance at ``origin + cell_size * (i, j(, k))``.
    Values between nodes are multilinear interpolants; outside the grid the
    boundary cell's interpolant is extended linearly.
    """

    def __init__(self, grid, origin, cell_size):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim not in (2, 3):
            raise ConfigError("SDF grid must be 2D or 3D")
        if grid.size == 0 or min(grid.shape) < 2:
            raise ConfigError("SDF grid needs at least two nodes per axis")
        if not cell_size > 0:
            raise ConfigError("cell_size must be positive")
        origin = np.asarray(origin, dtype=float)
        if origin.shape != (grid.ndim,):
            raise ConfigError("origin dimension does not match the grid")
        self.grid = grid
        self.grid.flags.writeable = False
        self.origin = origin
        self.cell_size = float(cell_size)

    @property
    def dims(self):
        return self.grid.ndim

    @property
    def shape(self):
        return self.grid.shape

    def query(self, p):
        """Distance and gradient at one point."""
        d, g = self.query_batch(np.asarray(p, dtype=float)[None, :])
        return float(d[0]), g[0]

    def query_batch(self, P):
        """Distances (k,) and gradients (k, dims) at points ``P`` (k, dims)."""
        P = np.asarray(P, dtype=float).reshape(-1, self.dims)
        u = (P - self.origin) / self.cell_size
        shape = np.array(self.shape)
        i0 = np.clip(np.floor(u).astype(int), 0, shape - 2)
        f = u - i0
        g = self.grid
        if self.dims == 2:
            fx, fy = f[:, 0], f[:, 1]
            ix, iy = i0[:, 0], i0[:, 1]
            c00 = g[ix, iy]
            c10 = g[ix + 1, iy]
            c01 = g[ix, iy + 1]
            c11 = g[ix + 1, iy + 1]
            d = (c00 * (1 - fx) * (1 - fy) + c10 * fx * (1 - fy)
                 + c01 * (1 - fx) * fy + c11 * fx * fy)
            gx = (c10 - c00) * (1 - fy) + (c11 - c01) * fy
            gy = (c01 - c00) * (1 - fx) + (c11 - c10) * fx
            grad = np.stack([gx, gy], axis=1)
        else:
            fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
            ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
            c = {}
            for a in (0, 1):
                for b in (0, 1):
                    for e in (0, 1):
                        c[a, b, e] = g[ix + a, iy + b, iz + e]
            wx = (1 - fx, fx)
            wy = (1 - fy, fy)
            wz = (1 - fz, fz)
            d = sum(c[a, b, e] * wx[a] * wy[b] * wz[e]
                    for a in (0, 1) for b in (0, 1) for e in (0, 1))
            sgn = (-1.0, 1.0)
            gx = sum(c[a, b, e] * sgn[a] * wy[b] * wz[e]
                     for a in (0, 1) for b in (0, 1) for e in (0, 1))
            gy = sum(c[a, b, e] * wx[a] * sgn[b] * wz[e]
                     for a in (0, 1) for b in (0, 1) for e in (0, 1))
            gz = sum(c[a, b, e] * wx[a] * wy[b] * sgn[e]
                     for a in (0, 1) for b in (0, 1) for e in (0, 1))
            grad = np.stack([gx, gy, gz], axis=1)
        return d, grad / self.cell_size

    @classmethod
    def from_boxes(cls, origin, shape, cell_size, boxes):
        """Exact signed distance to a union of axis-aligned boxes, sampled on a grid.

        ``boxes`` is a sequence of ``(center, half_extents)`` pairs.
        """
        origin = np.asarray(origin, dtype=float)
        axes = [origin[k] + cell_size * np.arange(shape[k]) for k in range(len(shape))]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        dist = np.full(tuple(shape), FREE_SPACE_DISTANCE)
        for center, half in boxes:
            dist = np.minimum(dist, box_distance(pts, center, half))
        return cls(dist, origin, cell_size)

    def save(self, path):
        path = Path(path)
        with path.open("w") as fh:
            fh.write("# signed distance field, row-major values follow the header\n")
            fh.write(f"dims {self.dims}\n")
            fh.write("shape " + " ".join(str(s) for s in self.shape) + "\n")
            fh.write("origin " + " ".join(repr(float(o)) for o in self.origin) + "\n")
            fh.write(f"cell_size {self.cell_size!r}\n")
            np.savetxt(fh, self.grid.reshape(-1, self.shape[-1]), fmt="%.17g")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"SDF file not found: {path}")
        header = {}
        rows = []
        with path.open() as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key = line.split()[0]
                if key in ("dims", "shape", "origin", "cell_size"):
                    header[key] = line.split()[1:]
                else:
                    rows.append(line)
        missing = {"dims", "shape", "origin", "cell_size"} - header.keys()
        if missing:
            raise ConfigError(f"SDF file {path} is missing header fields: {sorted(missing)}")
        shape = tuple(int(s) for s in header["shape"])
        if len(shape) != int(header["dims"][0]):
            raise ConfigError(f"SDF file {path}: shape does not match dims")
        values = np.array(" ".join(rows).split(), dtype=float)
        if values.size != int(np.prod(shape)):
            raise ConfigError(f"SDF file {path}: expected {int(np.prod(shape))} values, found {values.size}")
        return cls(values.reshape(shape), [float(o) for o in header["origin"]], float(header["cell_size"][0]))


def box_distance(P, center, half):
    """Exact signed distance from points ``P`` (..., dims) to an axis-aligned box."""
    q = np.abs(P - np.asarray(center, dtype=float)) - np.asarray(half, dtype=float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sdf_query(field, p):
    """Interpolated distance and its gradient at ``p``."""
    return field.query(p)


@dataclass(frozen=True)
class RobotModel:
    """Sphere model of a robot.

    ``point_robot``: one sphere at the first ``dof`` state entries.
    ``planar_arm``: ``points_per_link`` spheres per link, placed at fractions
    ``1/k, 2/k, ..., 1`` of each link (the last one is the joint/tip).
    """

    kind: str
    dof: int
    radius: object = 0.0
    link_lengths: tuple = ()
    points_per_link: int = 3

    def __post_init__(self):
        if self.kind not in ("point_robot", "planar_arm"):
            raise ConfigError(f"unknown robot kind {self.kind!r}")
        if self.kind == "planar_arm":
            if len(self.link_lengths) != self.dof:
                raise ConfigError("planar_arm needs one link length per joint")
            if self.points_per_link < 1:
                raise ConfigError("points_per_link must be >= 1")
        radii = np.broadcast_to(np.asarray(self.radius, dtype=float), (self.n_points,))
        if np.any(radii < 0):
            raise ConfigError("sphere radii must be nonnegative")

    @property
    def workspace_dim(self):
        return self.dof if self.kind == "point_robot" else 2

    @property
    def n_points(self):
        return 1 if self.kind == "point_robot" else self.dof * self.points_per_link

    @property
    def radii(self):
        return np.broadcast_to(np.asarray(self.radius, dtype=float), (self.n_points,)).copy()

    def fk_batch(self, Q):
        """Sphere centers (M, k, w) and Jacobians (M, k, w, dof) for configurations ``Q`` (M, dof)."""
        Q = np.asarray(Q, dtype=float)[:, :self.dof]
        M = Q.shape[0]
        if self.kind == "point_robot":
            pts = Q[:, None, :]
            J = np.broadcast_to(np.eye(self.dof), (M, 1, self.dof, self.dof)).copy()
            return pts, J
        L = np.asarray(self.link_lengths, dtype=float)
        theta = np.cumsum(Q, axis=1)
        c, s = np.cos(theta), np.sin(theta)
        seg = L * np.stack([c, s], axis=-1).transpose(2, 0, 1)  # (2, M, dof)
        dseg = L * np.stack([-s, c], axis=-1).transpose(2, 0, 1)
        joints = np.concatenate([np.zeros((2, M, 1)), np.cumsum(seg, axis=2)], axis=2)
        fr = np.linspace(0.0, 1.0, self.points_per_link + 1)[1:]
        k = self.n_points
        pts = np.empty((M, k, 2))
        J = np.zeros((M, k, 2, self.dof))
        # mask[l, j] = 1 when joint j moves link l (j <= l)
        mask = np.tril(np.ones((self.dof, self.dof)))
        for i in range(self.dof):
            for a, f in enumerate(fr):
                idx = i * self.points_per_link + a
                pts[:, idx] = (joints[:, :, i] + f * seg[:, :, i]).T
                # full links before i, then a fraction of link i
                w = np.zeros(self.dof)
                w[:i] = 1.0
                w[i] = f
                contrib = dseg * w[None, None, :]  # (2, M, dof) over links l
                J[:, idx] = np.einsum("cml,lj->mcj", contrib, mask)
        return pts, J

    def forward_kinematics(self, q):
        """List of ``(center, radius)`` spheres for one configuration."""
        pts, _ = self.fk_batch(np.asarray(q, dtype=float)[None, :])
        return [(p, r) for p, r in zip(pts[0], self.radii)]


@dataclass(frozen=True)
class CollisionParams:
    eps_margin: float = 0.0
    sigma_obs: object = 1.0

    def __post_init__(self):
        if not self.eps_margin >= 0:
            raise ConfigError("eps_margin must be nonnegative")
        if np.any(np.asarray(self.sigma_obs, dtype=float) <= 0):
            raise ConfigError("sigma_obs entries must be positive")


def hinge(d, params, radius):
    """``max(eps_margin + radius - d, 0)``."""
    return np.maximum(params.eps_margin + radius - np.asarray(d, dtype=float), 0.0)


@dataclass(frozen=True)
class CollisionModel:
    """Robot geometry, distance field and hinge parameters bundled together."""

    robot: RobotModel
    field: SignedDistanceField = None
    params: CollisionParams = dc_field(default_factory=CollisionParams)

    def __post_init__(self):
        if self.field is not None and self.field.dims != self.robot.workspace_dim:
            raise ConfigError("SDF dimension does not match the robot workspace")

    def _sigma(self):
        return np.broadcast_to(np.asarray(self.params.sigma_obs, dtype=float), (self.robot.n_points,))

    def hinge_batch(self, X, with_jacobian=False):
        """Hinge values (M, k) and optionally their Jacobians (M, k, state_dim)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        M, n = X.shape
        k = self.robot.n_points
        if self.field is None:
            h = np.zeros((M, k))
            return (h, np.zeros((M, k, n))) if with_jacobian else h
        pts, Jfk = self.robot.fk_batch(X)
        d, g = self.field.query_batch(pts.reshape(-1, pts.shape[-1]))
        d = d.reshape(M, k)
        h = hinge(d, self.params, self.robot.radii[None, :])
        if not with_jacobian:
            return h
        g = g.reshape(M, k, -1)
        active = (h > 0).astype(float)
        dh = -active[:, :, None] * np.einsum("mkw,mkwj->mkj", g, Jfk)
        J = np.zeros((M, k, n))
        J[:, :, :self.robot.dof] = dh
        return h, J

    def cost_batch(self, X):
        h = self.hinge_batch(X)
        return h**2 @ self._sigma()

    def cost(self, x):
        return float(self.cost_batch(np.asarray(x)[None, :])[0])

    def grad(self, x):
        """Gradient and Gauss-Newton Hessian of the collision cost at one state."""
        h, J = self.hinge_batch(np.asarray(x)[None, :], with_jacobian=True)
        h, J = h[0], J[0]
        s = self._sigma()
        g = J.T @ (2.0 * s * h)
        H = 2.0 * J.T @ (s[:, None] * J)
        return g, 0.5 * (H + H.T)

    def grad_batch(self, X):
        """Costs (M,), gradients (M, n) and Gauss-Newton Hessians (M, n, n)."""
        h, J = self.hinge_batch(X, with_jacobian=True)
        s = self._sigma()
        V = h**2 @ s
        g = np.einsum("mkj,mk->mj", J, 2.0 * s * h)
        H = 2.0 * np.einsum("mki,mkj,k->mij", J, J, s)
        return V, g, H


def forward_kinematics(model, q):
    return model.forward_kinematics(q)


def collision_cost(model, field, params, state):
    """``sum_k sigma_k h_k^2`` over the robot's checking spheres."""
    return CollisionModel(model, field, params).cost(state)


def collision_grad(model, field, params, state):
    """``(grad V, 2 J^T Sigma J)`` with second-order hinge terms dropped."""
    return CollisionModel(model, field, params).grad(state)
