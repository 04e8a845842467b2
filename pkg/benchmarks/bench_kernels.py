"""Compare the compiled and pure-numpy kernel backends.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Prints the median wall time of each kernel under both backends, the speedup,
and the largest absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from stochplan import _pykernels

try:
    from stochplan import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(rng):
    n, steps = 4, 1000
    times = np.linspace(0.0, 4.0, steps + 1)
    A = 0.1 * rng.standard_normal((steps + 1, n, n))
    F = rng.standard_normal((steps + 1, n))
    C = np.broadcast_to(np.eye(n), (steps + 1, n, n)).copy()
    Q = np.broadcast_to(0.1 * np.eye(n), (steps + 1, n, n)).copy()

    m, d = 50, 6
    diag = np.empty((m, d, d))
    lower = 0.1 * rng.standard_normal((m - 1, d, d))
    for i in range(m):
        G = rng.standard_normal((d, d))
        diag[i] = G @ G.T + 2 * d * np.eye(d)
    b = rng.standard_normal((m, d))

    def chol(mod):
        return mod.bt_cholesky(diag, lower)

    Ld, Ll = _pykernels.bt_cholesky(diag, lower)
    return {
        "linear_ode (1000 steps, n=4)": lambda mod: mod.linear_ode(A, F, np.ones(n), times),
        "lyapunov_ode (1000 steps, n=4)": lambda mod: mod.lyapunov_ode(A, C, np.eye(n), times),
        "riccati_backward (1000 steps, n=4)": lambda mod: mod.riccati_backward(A, C, Q, np.zeros((n, n)), times),
        "bt_cholesky (50 blocks, 6x6)": chol,
        "bt_solve (50 blocks, 6x6)": lambda mod: mod.bt_solve_upper(Ld, Ll, mod.bt_solve(Ld, Ll, b)),
        "bt_selinv (50 blocks, 6x6)": lambda mod: mod.bt_selinv(Ld, Ll),
    }


def _maxdiff(x, y):
    if isinstance(x, tuple):
        return max(_maxdiff(a, c) for a, c in zip(x, y))
    return float(np.max(np.abs(np.asarray(x) - np.asarray(y))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=3)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not available; build it with `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in _cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=args.number, repeat=args.repeat)) / args.number
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=args.number, repeat=args.repeat)) / args.number
        diff = _maxdiff(fn(_pykernels), fn(_ckernels))
        print(f"{name:38s} {1e3 * t_py:12.3f} {1e3 * t_c:14.3f} {t_py / t_c:8.1f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
