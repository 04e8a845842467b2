"""Command-line experiment runner (``plan``).

Exit codes: 0 success, 2 invalid configuration or missing file, 3 solver failure.
"""
import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import covsteer, kernels
from .blocktri import BlockTridiag
from .config import bundled_configs, dump_config, field_from_boxes, load_config
from .errors import ConfigError, NumericalDomainError, SolverFailure
from .gp_prior import build_prior
from .gvi import gvi_solve, initial_trajectory
from .linsys import LTVSystem, TimeGrid, linearize_planar_quadrotor, planar_quadrotor_field
from .pgcs import control_energy_mc, knot_kl, pgcs_solve, propagate_nominal

OUTPUT_ROOT_ENV = "PLAN_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


# ---------------------------------------------------------------- file output


def _fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    """One header line, then rows with 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) if isinstance(v, float) or isinstance(v, np.floating)
                              else str(v) for v in row) + "\n")


def _state_cols(n):
    return [f"x{i}" for i in range(n)]


def write_moments(out, times, means, covs):
    n = means.shape[1]
    write_csv(out / "means.csv", ["knot", "t"] + _state_cols(n),
              ([i, float(t)] + [float(v) for v in m] for i, (t, m) in enumerate(zip(times, means))))
    cols = [f"c{i}_{j}" for i in range(n) for j in range(n)]
    write_csv(out / "covariances.csv", ["knot", "t"] + cols,
              ([i, float(t)] + [float(v) for v in C.ravel()] for i, (t, C) in enumerate(zip(times, covs))))


def write_samples(path, times, samples):
    """``samples`` has shape (n_samples, n_knots, n)."""
    n = samples.shape[2] if samples.ndim == 3 else 0
    rows = ([s, k, float(times[k])] + [float(v) for v in samples[s, k]]
            for s in range(samples.shape[0]) for k in range(samples.shape[1]))
    write_csv(path, ["sample", "knot", "t"] + _state_cols(n), rows)


def output_dir(cfg, override=None):
    if override:
        return Path(override)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, Path.cwd() / "results"))
    return root / cfg.output


# ---------------------------------------------------------------- sampling


def sample_gvi(mu, prec, n, seed):
    """Joint samples from ``N(mu, prec^{-1})`` via the block Cholesky factor of ``prec``."""
    rng = np.random.default_rng(seed)
    m, d = prec.m, prec.n
    if n == 0:
        return np.zeros((0, m, d))
    return (mu + prec.sample(rng, n)).reshape(n, m, d)


def sample_pgcs(dist, n, seed, mode="knot"):
    """Samples at the knots: independent knot marginals, or simulated paths of the closed-loop SDE."""
    rng = np.random.default_rng(seed)
    idx = dist["knot_index"]
    z, Sig = dist["z"][idx], dist["Sigma"][idx]
    m, d = z.shape
    if n == 0:
        return np.zeros((0, m, d))
    if mode == "knot":
        out = np.empty((n, m, d))
        for k in range(m):
            w, U = np.linalg.eigh(0.5 * (Sig[k] + Sig[k].T))
            L = U * np.sqrt(np.clip(w, 0.0, None))
            out[:, k] = z[k] + rng.standard_normal((n, d)) @ L.T
        return out
    if mode != "sde":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    times, A, a, B, eps = dist["times"], dist["A_cl"], dist["a_cl"], dist["B"], float(dist["epsilon"])
    K0 = dist["Sigma"][0]
    w, U = np.linalg.eigh(K0)
    x = dist["z"][0] + rng.standard_normal((n, d)) @ (U * np.sqrt(np.clip(w, 0, None))).T
    out = np.empty((n, m, d))
    pos = {int(i): j for j, i in enumerate(idx)}
    se = np.sqrt(eps)
    for k in range(times.size):
        if k in pos:
            out[:, pos[k]] = x
        if k == times.size - 1:
            break
        h = times[k + 1] - times[k]
        noise = se * (rng.standard_normal((n, B.shape[2])) * np.sqrt(h)) @ B[k].T
        # stochastic Heun: additive noise, deterministic part matches the moment integrator
        f1 = x @ A[k].T + a[k]
        xp = x + h * f1 + noise
        x = x + 0.5 * h * (f1 + xp @ A[k + 1].T + a[k + 1]) + noise
    return out


# ---------------------------------------------------------------- plot data


def ellipse_points(center, cov, n_points=64, nsigma=3.0):
    """Boundary of the ``nsigma`` ellipse of a 2x2 covariance."""
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    L = U * (nsigma * np.sqrt(np.clip(w, 0.0, None)))
    th = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
    return center + np.stack([np.cos(th), np.sin(th)], axis=1) @ L.T


def ellipsoid_axes(cov, nsigma=3.0):
    """Scaled principal axes (columns) and the rotation quaternion ``(w, x, y, z)`` of a 3x3 covariance."""
    from scipy.spatial.transform import Rotation

    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    if np.linalg.det(U) < 0:
        U[:, 0] = -U[:, 0]
    axes = U * (nsigma * np.sqrt(np.clip(w, 0.0, None)))
    x, y, z, qw = Rotation.from_matrix(U).as_quat()
    return axes, np.array([qw, x, y, z])


def emit_plot_data(result_dir, out_dir=None):
    result_dir = Path(result_dir)
    out = Path(out_dir) if out_dir else result_dir / "plot"
    out.mkdir(parents=True, exist_ok=True)
    dist = np.load(result_dir / "distribution.npz")
    means, covs, times = dist["knot_means"], dist["knot_covs"], dist["knot_times"]
    w = int(dist["position_dim"])
    write_csv(out / "mean_path.csv", ["knot", "t"] + [f"p{i}" for i in range(w)],
              ([k, float(t)] + [float(v) for v in means[k, :w]] for k, t in enumerate(times)))
    if w == 2:
        rows = []
        for k in range(means.shape[0]):
            for j, p in enumerate(ellipse_points(means[k, :2], covs[k, :2, :2])):
                rows.append([k, j, float(p[0]), float(p[1])])
        write_csv(out / "ellipses.csv", ["knot", "point", "x", "y"], rows)
    elif w == 3:
        rows = []
        for k in range(means.shape[0]):
            axes, q = ellipsoid_axes(covs[k, :3, :3])
            rows.append([k] + [float(v) for v in means[k, :3]] + [float(v) for v in axes.T.ravel()]
                        + [float(v) for v in q])
        hdr = ["knot", "cx", "cy", "cz"] + [f"axis{i}_{c}" for i in range(3) for c in "xyz"] + ["qw", "qx", "qy", "qz"]
        write_csv(out / "ellipsoids.csv", hdr, rows)
    return out


# ---------------------------------------------------------------- experiments


def _collision_summary(cfg, X, solver):
    """Hinge costs of states ``X`` with the configured margin and with bare geometry."""
    if cfg.field is None:
        return 0.0, 0.0, None
    margin = cfg.collision_model(solver=solver).cost_batch(X)
    phys = cfg.collision_model(physical=True, solver=solver).cost_batch(X)
    pts, _ = cfg.robot.fk_batch(X)
    d, _ = cfg.field.query_batch(pts.reshape(-1, pts.shape[-1]))
    clearance = float(np.min(d.reshape(X.shape[0], -1) - cfg.robot.radii[None, :]))
    return float(margin.sum()), float(phys.sum()), clearance


def run_gvi(cfg):
    sys_ = cfg.system("gvi")
    T = cfg.horizon("gvi")
    grid = TimeGrid.uniform(0.0, T, cfg.knots("gvi") - 1)
    prior = build_prior(sys_, grid, cfg.boundary("gvi"))
    model = cfg.collision_model(solver="gvi") if cfg.field is not None else None
    q0 = initial_trajectory(prior, cfg.waypoints())
    res = gvi_solve(prior, model, cfg.gvi_config(), q0)
    q = res.q
    Sd, _ = q.marginals()
    means = q.means()
    margin, phys, clearance = _collision_summary(cfg, means, "gvi")
    last = res.history[-1]
    summary = {
        "stopped": res.stopped,
        "iterations": len(res.history) - 1,
        "switched_at": res.switched_at,
        "final_costs": {"prior": last.prior, "collision": last.collision, "mp": last.mp,
                        "entropy": last.entropy, "total": last.total},
        "mean_hinge_cost": margin,
        "mean_hinge_cost_geometry": phys,
        "min_clearance": clearance,
    }
    cost_rows = [[i, r.temperature, r.prior, r.collision, r.mp, r.entropy, r.total, r.objective,
                  r.backtracks, int(r.accepted)] for i, r in enumerate(res.history)]
    cost_hdr = ["iteration", "temperature", "prior", "collision", "mp", "entropy", "total",
                "objective", "backtracks", "accepted"]
    dist = {"solver": "gvi", "mu": q.mu, "prec_diag": q.prec.diag, "prec_lower": q.prec.lower,
            "knot_times": grid.knots, "knot_means": means, "knot_covs": Sd}
    return summary, cost_hdr, cost_rows, dist, None


def run_pgcs(cfg):
    sys_ = cfg.system("pgcs")
    T = cfg.horizon("pgcs")
    pc = cfg.pgcs_config()
    model = cfg.collision_model(solver="pgcs") if cfg.field is not None else None
    res = pgcs_solve(sys_, T, cfg.boundary("pgcs"), model, pc)
    sol = res.solution
    idx = res.knot_index
    margin, phys, clearance = _collision_summary(cfg, sol.mean, "pgcs")
    summary = {
        "stopped": res.stopped,
        "failed": res.failed,
        "message": res.message,
        "iterations": len(res.history) - 1,
        "final_cost": res.history[-1].V,
        "mean_hinge_cost": margin,
        "mean_hinge_cost_geometry": phys,
        "min_clearance": clearance,
        "terminal_mean": sol.mean[-1].tolist(),
        "terminal_covariance": sol.cov[-1].tolist(),
    }
    cost_rows = [[i, it.V, it.eta, it.backtracks, int(it.decreased)] for i, it in enumerate(res.history)]
    cost_hdr = ["iteration", "V", "eta", "backtracks", "decreased"]
    A, _, B = sys_.sample(res.times)
    dist = {"solver": "pgcs", "times": res.times, "z": sol.mean, "Sigma": sol.cov, "A_cl": sol.A_cl,
            "a_cl": sol.a_cl, "B": B, "epsilon": pc.epsilon, "knot_index": idx,
            "knot_times": res.times[idx], "knot_means": sol.mean[idx], "knot_covs": sol.cov[idx]}
    n, m = sol.gain.shape[2], sol.gain.shape[1]
    gains_hdr = ["step", "t"] + [f"K{i}_{j}" for i in range(m) for j in range(n)] + [f"d{i}" for i in range(m)]
    gains_rows = ([k, float(t)] + [float(v) for v in sol.gain[k].ravel()] + [float(v) for v in sol.feedforward[k]]
                  for k, t in enumerate(res.times))
    return summary, cost_hdr, cost_rows, dist, (gains_hdr, gains_rows)


def run(cfg, solver=None, out=None):
    """Solve one experiment and write its result files. Returns the summary mapping."""
    solver = solver or cfg.solver
    cfg.validate_solver(solver)
    out = output_dir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if solver == "gvi":
        summary, cost_hdr, cost_rows, dist, gains = run_gvi(cfg)
    else:
        summary, cost_hdr, cost_rows, dist, gains = run_pgcs(cfg)
    t_solve = time.perf_counter() - t0
    dist["position_dim"] = cfg.robot.workspace_dim if cfg.robot.kind == "point_robot" else cfg.robot.dof
    write_moments(out, dist["knot_times"], dist["knot_means"], dist["knot_covs"])
    write_csv(out / "costs.csv", cost_hdr, cost_rows)
    if gains is not None:
        write_csv(out / "gains.csv", *gains)
    samples = draw_samples(dist, cfg.samples, cfg.seed)
    write_samples(out / "samples.csv", dist["knot_times"], samples)
    np.savez(out / "distribution.npz", **dist)
    summary = {
        "name": cfg.name,
        "solver": solver,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "samples": cfg.samples,
        "kernel_backend": kernels.BACKEND,
        **summary,
    }
    summary = _plain(summary)
    with open(out / "summary.yaml", "w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=True)
    with open(out / "config.yaml", "w") as fh:
        fh.write(dump_config(cfg))
    with open(out / "timings.yaml", "w") as fh:
        yaml.safe_dump({"solve_seconds": t_solve, "total_seconds": time.perf_counter() - t0}, fh)
    return summary


def draw_samples(dist, n, seed, mode="knot"):
    if dist["solver"] == "gvi":
        prec = BlockTridiag(dist["prec_diag"], dist["prec_lower"])
        return sample_gvi(dist["mu"], prec, n, seed)
    return sample_pgcs(dist, n, seed, mode)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


# ---------------------------------------------------------------- quadrotor demo


def quadrotor_demo(out, T=3.0, epsilon=0.05, steps=600, mass=1.0, inertia=0.1, arm=0.3, gravity=9.81):
    """Uncontrolled vs. steered moments of a planar quadrotor linearized along a banking nominal."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    u_hover = np.full(2, mass * gravity / 2.0)

    def nominal(t):
        return np.array([t, 0.0, 0.2 * np.sin(t), 1.0, 0.0, 0.2 * np.cos(t)])

    def A_fn(t):
        return linearize_planar_quadrotor(nominal(t), mass, inertia, arm, gravity)[0]

    def a_fn(t):
        x = nominal(t)
        return planar_quadrotor_field(x, u_hover, mass, inertia, arm, gravity) - A_fn(t) @ x

    B = linearize_planar_quadrotor(nominal(0.0), mass, inertia, arm, gravity)[1]
    sys_ = LTVSystem(6, 2, A_fn, a_fn, lambda t: B, epsilon)
    times = np.linspace(0.0, T, steps + 1)
    A, a, Bs = sys_.sample(times)
    K0 = 0.01 * np.eye(6)
    z0, S0 = propagate_nominal(times, A, a, Bs, nominal(0.0), K0, epsilon)
    prob = covsteer.SteeringProblem(times, A, a, Bs, epsilon, nominal(0.0), K0, nominal(T), 0.02 * np.eye(6))
    sol = covsteer.solve(prob)
    for tag, z, S in (("uncontrolled", z0, S0), ("controlled", sol.mean, sol.cov)):
        d = out / tag
        d.mkdir(exist_ok=True)
        write_moments(d, times, z, S)
    # few knots: each interval needs many integration steps for its transition covariance
    idx = np.unique(np.linspace(0, steps, 11).round().astype(int))
    kl = knot_kl(times, idx, sol.A_cl, sol.a_cl, A, a, Bs, sol.mean, sol.cov, epsilon)
    energy, se = control_energy_mc(times, sol.A_cl, sol.a_cl, A, a, Bs, nominal(0.0), K0, epsilon, 2000, 0)
    summary = {"knot_kl": kl, "control_energy_over_2eps": energy, "mc_standard_error": se,
               "terminal_covariance_error": float(np.linalg.norm(sol.cov[-1] - prob.KT) / np.linalg.norm(prob.KT))}
    with open(out / "summary.yaml", "w") as fh:
        yaml.safe_dump(_plain(summary), fh, sort_keys=True)
    return summary


# ---------------------------------------------------------------- entry point


def _parser():
    p = argparse.ArgumentParser(prog="plan", description="Motion planning under uncertainty experiments.")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="solve one experiment config (path or bundled name)")
    r.add_argument("config")
    r.add_argument("--solver", choices=["gvi", "pgcs"])
    r.add_argument("--out", help="output directory (default: $PLAN_OUTPUT_ROOT/<output>)")
    b = sub.add_parser("batch", help="run every *.yaml config in a directory")
    b.add_argument("directory")
    b.add_argument("--solver", choices=["gvi", "pgcs"])
    b.add_argument("--workers", type=int, default=4)
    s = sub.add_parser("sample", help="draw trajectories from a saved result")
    s.add_argument("result")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=["knot", "sde"], default="knot")
    s.add_argument("--out")
    pd = sub.add_parser("plotdata", help="write 3-sigma ellipse data for a saved result")
    pd.add_argument("result")
    pd.add_argument("--out")
    g = sub.add_parser("sdfgen", help="build an SDF file from a box obstacle list")
    g.add_argument("obstacles")
    g.add_argument("out")
    c = sub.add_parser("config-dump", help="print a config in canonical form")
    c.add_argument("config")
    c.add_argument("--out")
    sub.add_parser("list", help="list bundled configs")
    q = sub.add_parser("quad-demo", help="planar quadrotor linearization demo")
    q.add_argument("--out", default="quad_demo")
    return p


def _cmd_batch(args):
    paths = sorted(Path(args.directory).glob("*.yaml"))
    if not paths:
        raise ConfigError(f"no *.yaml configs in {args.directory}")
    cfgs = [load_config(str(p)) for p in paths]

    def job(cfg):
        try:
            run(cfg, args.solver)
            return cfg.name, "ok"
        except (SolverFailure, NumericalDomainError, np.linalg.LinAlgError) as exc:
            return cfg.name, f"solver failure: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(job, cfgs))
    failed = False
    for name, status in results:
        print(f"{name}: {status}")
        failed |= status != "ok"
    return EXIT_SOLVER if failed else EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            cfg = load_config(args.config)
            summary = run(cfg, args.solver, args.out)
            print(yaml.safe_dump(summary, sort_keys=True), end="")
            if summary.get("failed"):
                return EXIT_SOLVER
        elif args.cmd == "batch":
            return _cmd_batch(args)
        elif args.cmd == "sample":
            res = Path(args.result)
            if not (res / "distribution.npz").is_file():
                raise FileNotFoundError(f"no distribution.npz in {res}")
            dist = dict(np.load(res / "distribution.npz"))
            dist["solver"] = str(dist["solver"])
            samples = draw_samples(dist, args.n, args.seed, args.mode)
            out = Path(args.out) if args.out else res / f"samples_n{args.n}_seed{args.seed}_{args.mode}.csv"
            write_samples(out, dist["knot_times"], samples)
            print(out)
        elif args.cmd == "plotdata":
            print(emit_plot_data(args.result, args.out))
        elif args.cmd == "sdfgen":
            with open(args.obstacles) as fh:
                layout = yaml.safe_load(fh)
            field_from_boxes(layout, args.obstacles).save(args.out)
            print(args.out)
        elif args.cmd == "config-dump":
            text = dump_config(load_config(args.config))
            if args.out:
                Path(args.out).write_text(text)
            else:
                print(text, end="")
        elif args.cmd == "list":
            print("\n".join(bundled_configs()))
        elif args.cmd == "quad-demo":
            print(yaml.safe_dump(quadrotor_demo(args.out), sort_keys=True), end="")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, NumericalDomainError, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
