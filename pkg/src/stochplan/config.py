"""Experiment configuration: loading, validation and object construction.

Configs are YAML mappings. Relative file references (environment files, SDF
files) resolve against the directory of the config file, then against the
bundled ``configs`` directory.
"""
import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .environment import CollisionModel, CollisionParams, RobotModel, SignedDistanceField
from .errors import ConfigError
from .gvi import GVIConfig
from .linsys import constant_velocity_system
from .pgcs import PGCSConfig

BUNDLED_DIR = Path(__file__).parent / "configs"

SOLVERS = ("gvi", "pgcs")

_GVI_KEYS = {"eta", "max_backtrack", "T_low", "T_high", "n_low", "iterations", "gh_degree", "tol"}
_PGCS_KEYS = {"iterations", "eta", "beta", "max_backtrack", "tol", "param_tol", "substeps"}
_SECTION_KEYS = {"horizon", "knots", "K0", "KT", "waypoints", "sigma_obs"}


def bundled_configs():
    return sorted(p.stem for p in BUNDLED_DIR.glob("*.yaml"))


def resolve_config_path(ref):
    """A path to an existing file, or the name of a bundled config."""
    p = Path(ref)
    if p.is_file():
        return p
    cand = BUNDLED_DIR / f"{ref}.yaml"
    if cand.is_file():
        return cand
    raise FileNotFoundError(f"config not found: {ref}")


def _resolve_file(ref, base):
    p = Path(ref)
    if p.is_absolute():
        return p
    for root in (base, BUNDLED_DIR):
        if root is not None and (root / p).is_file():
            return root / p
    return (base or Path.cwd()) / p


def _cov(value, n, field):
    M = np.asarray(value, dtype=float)
    if M.ndim == 0:
        M = float(M) * np.eye(n)
    elif M.ndim == 1:
        if M.size != n:
            raise ConfigError(f"{field}: expected {n} diagonal entries, got {M.size}")
        M = np.diag(M)
    if M.shape != (n, n):
        raise ConfigError(f"{field}: expected a {n}x{n} matrix")
    if not np.allclose(M, M.T):
        raise ConfigError(f"{field}: matrix is not symmetric")
    if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
        raise ConfigError(f"{field}: matrix is not positive definite")
    return M


def _vec(value, n, field):
    v = np.asarray(value, dtype=float)
    if v.shape != (n,):
        raise ConfigError(f"{field}: expected a vector of length {n}")
    if not np.all(np.isfinite(v)):
        raise ConfigError(f"{field}: entries must be finite")
    return v


def _section(raw, name, keys):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    unknown = set(sec) - keys - _SECTION_KEYS
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    return sec


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` keeps the original mapping."""

    raw: dict
    name: str
    solver: str
    robot: RobotModel
    start: np.ndarray
    goal: np.ndarray
    collision: CollisionParams
    field: SignedDistanceField
    seed: int
    samples: int
    output: str
    base_dir: Path = None

    @property
    def state_dim(self):
        return 2 * self.robot.dof

    def section(self, solver=None):
        return self.raw.get(solver or self.solver) or {}

    def horizon(self, solver=None):
        T = float(self.section(solver).get("horizon", 1.0))
        if not T > 0:
            raise ConfigError(f"{solver or self.solver}.horizon must be positive")
        return T

    def knots(self, solver=None):
        solver = solver or self.solver
        k = int(self.section(solver).get("knots", 15 if solver == "gvi" else 50))
        if k < 2:
            raise ConfigError(f"{solver}.knots must be >= 2")
        return k

    def boundary(self, solver=None):
        sec = self.section(solver)
        n = self.state_dim
        K0 = _cov(sec.get("K0", 0.01), n, f"{solver or self.solver}.K0")
        KT = _cov(sec.get("KT", 0.01), n, f"{solver or self.solver}.KT")
        return self.start, K0, self.goal, KT

    def waypoints(self):
        """Optional GVI initialization waypoints (workspace positions)."""
        wps = self.section("gvi").get("waypoints") or []
        dof = self.robot.dof
        return [_vec(w, dof, "gvi.waypoints") for w in wps]

    def gvi_config(self):
        kw = {k: v for k, v in self.section("gvi").items() if k in _GVI_KEYS}
        return GVIConfig(**kw)

    def pgcs_config(self):
        sec = self.section("pgcs")
        kw = {k: v for k, v in sec.items() if k in _PGCS_KEYS}
        kw["epsilon"] = float(self.raw.get("dynamics", {}).get("epsilon", 0.1))
        kw["knots"] = self.knots("pgcs")
        return PGCSConfig(**kw)

    def system(self, solver=None):
        solver = solver or self.solver
        # the GVI prior uses unit diffusion; PGCS scales the noise by epsilon
        eps = 1.0 if solver == "gvi" else float(self.raw.get("dynamics", {}).get("epsilon", 0.1))
        return constant_velocity_system(self.robot.dof, eps)

    def collision_model(self, physical=False, solver=None):
        """Hinge model; ``physical=True`` drops the safety margin (pure sphere geometry).

        A ``sigma_obs`` entry in the solver section overrides the shared weight.
        """
        sigma = self.section(solver).get("sigma_obs", self.collision.sigma_obs)
        try:
            params = CollisionParams(0.0 if physical else self.collision.eps_margin, sigma)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sigma_obs: {exc}") from exc
        return CollisionModel(self.robot, self.field, params)

    def config_hash(self):
        """Hash of the settings and the distance grid (file locations excluded)."""
        data = {k: v for k, v in self.raw.items() if k not in ("output", "environment")}
        h = hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode())
        if self.field is not None:
            h.update(np.ascontiguousarray(self.field.grid).tobytes())
            h.update(np.asarray([*self.field.origin, self.field.cell_size]).tobytes())
        return h.hexdigest()[:16]

    def validate_solver(self, solver):
        if solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {solver!r}")
        self.boundary(solver)
        self.horizon(solver)
        self.knots(solver)
        if self.field is not None:
            self.collision_model(solver=solver)
        if solver == "gvi":
            self.gvi_config()
            self.waypoints()
        else:
            self.pgcs_config()


def load_environment(env, base):
    """SDF from an ``environment`` mapping: ``sdf`` file, ``file`` with boxes, or inline boxes.

    File references in ``env`` are rewritten to absolute paths.
    """
    if env is None:
        return None
    if not isinstance(env, dict):
        raise ConfigError("environment: expected a mapping")
    if "sdf" in env:
        path = _resolve_file(env["sdf"], base)
        env["sdf"] = str(path.resolve())
        return SignedDistanceField.load(path)
    if "file" in env:
        path = _resolve_file(env["file"], base)
        env["file"] = str(path.resolve())
        if not path.is_file():
            raise FileNotFoundError(f"environment file not found: {path}")
        with path.open() as fh:
            layout = yaml.safe_load(fh)
        return field_from_boxes(layout, str(path))
    if "boxes" in env:
        return field_from_boxes(env, "environment")
    if env.get("free", False):
        return None
    raise ConfigError("environment: give one of 'sdf', 'file', 'boxes' or 'free: true'")


def field_from_boxes(layout, where):
    try:
        dims = int(layout["dims"])
        origin = [float(v) for v in layout["origin"]]
        shape = [int(v) for v in layout["shape"]]
        cell = float(layout["cell_size"])
        boxes = [(b["center"], b["half_extents"]) for b in layout.get("boxes", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: malformed obstacle description ({exc})") from exc
    if len(origin) != dims or len(shape) != dims:
        raise ConfigError(f"{where}: origin/shape must have {dims} entries")
    for c, h in boxes:
        if len(c) != dims or len(h) != dims or min(h) < 0:
            raise ConfigError(f"{where}: each box needs {dims}-d center and nonnegative half_extents")
    return SignedDistanceField.from_boxes(origin, shape, cell, boxes)


def parse_config(raw, base_dir=None, name=None):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    solver = raw.get("solver", "gvi")
    if solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got {solver!r}")
    rob = raw.get("robot")
    if not isinstance(rob, dict):
        raise ConfigError("robot: expected a mapping")
    try:
        robot = RobotModel(
            kind=rob.get("kind", "point_robot"),
            dof=int(rob["dof"]),
            radius=rob.get("radius", 0.0),
            link_lengths=tuple(float(v) for v in rob.get("link_lengths", ())),
            points_per_link=int(rob.get("points_per_link", 3)),
        )
    except KeyError as exc:
        raise ConfigError(f"robot: missing field {exc}") from exc
    dyn = raw.get("dynamics", {}) or {}
    if dyn.get("model", "constant_velocity") != "constant_velocity":
        raise ConfigError("dynamics.model: only 'constant_velocity' is supported")
    if not float(dyn.get("epsilon", 0.1)) > 0:
        raise ConfigError("dynamics.epsilon must be positive")
    n = 2 * robot.dof
    start = _vec(raw.get("start"), n, "start")
    goal = _vec(raw.get("goal"), n, "goal")
    col = raw.get("collision", {}) or {}
    try:
        params = CollisionParams(float(col.get("eps_margin", 0.0)), col.get("sigma_obs", 1.0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"collision: {exc}") from exc
    field = load_environment(raw.get("environment"), base_dir)
    if field is not None and field.dims != robot.workspace_dim:
        raise ConfigError("environment dimension does not match the robot workspace")
    _section(raw, "gvi", _GVI_KEYS)
    _section(raw, "pgcs", _PGCS_KEYS)
    cfg = ExperimentConfig(
        raw=raw,
        name=str(raw.get("name", name or "experiment")),
        solver=solver,
        robot=robot,
        start=start,
        goal=goal,
        collision=params,
        field=field,
        seed=int(raw.get("seed", 0)),
        samples=int(raw.get("samples", 100)),
        output=str(raw.get("output", raw.get("name", name or "experiment"))),
        base_dir=base_dir,
    )
    if cfg.samples < 0:
        raise ConfigError("samples must be >= 0")
    cfg.validate_solver(solver)
    return cfg


def load_config(ref):
    path = resolve_config_path(ref)
    with path.open() as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return parse_config(raw, path.parent, path.stem)


def dump_config(cfg):
    """YAML text that re-loads to an equal configuration."""
    return yaml.safe_dump(cfg.raw, sort_keys=True)
