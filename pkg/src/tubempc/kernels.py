"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``TUBEMPC_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("TUBEMPC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py

rk4_rollout = _impl.rk4_rollout
gi_solve = _impl.gi_solve
spectral_norm_series = _impl.spectral_norm_series

QP_OK = _kernels_py.QP_OK
QP_INFEASIBLE = _kernels_py.QP_INFEASIBLE
QP_MAX_ITER = _kernels_py.QP_MAX_ITER

__all__ = ["BACKEND", "rk4_rollout", "gi_solve", "spectral_norm_series", "QP_OK", "QP_INFEASIBLE",
           "QP_MAX_ITER"]
