"""Backend selection for the hot numerical kernels.

The compiled ``_ckernels`` extension is used when it imports cleanly; the
pure numpy ``_pykernels`` module is the fallback. Set
``STOCHPLAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("STOCHPLAN_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        from . import _pykernels as _impl

BACKEND = "compiled" if _impl.__name__.endswith("_ckernels") else "python"

linear_ode = _impl.linear_ode
lyapunov_ode = _impl.lyapunov_ode
riccati_backward = _impl.riccati_backward
bt_cholesky = _impl.bt_cholesky
bt_solve = _impl.bt_solve
bt_solve_upper = _impl.bt_solve_upper
bt_selinv = _impl.bt_selinv

__all__ = [
    "BACKEND",
    "linear_ode",
    "lyapunov_ode",
    "riccati_backward",
    "bt_cholesky",
    "bt_solve",
    "bt_solve_upper",
    "bt_selinv",
]
