"""Strictly convex QP with box and general inequality constraints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class QPError(RuntimeError):
    """Solver gave up; carries the best iterate and its KKT residual."""

    def __init__(self, message, x=None, kkt_residual=np.inf):
        super().__init__(message)
        self.x = x
        self.kkt_residual = kkt_residual


class QPInfeasibleError(QPError):
    pass


@dataclass(frozen=True)
class QuadraticProgram:
    """``min 0.5 x'Hx + g'x`` s.t. ``lb <= x <= ub`` and ``G x <= h``.

    Any of ``lb``, ``ub``, ``G``/``h`` may be None; infinite bounds are ignored.
    """

    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("H must be square")
        if np.abs(H - H.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(H).max(initial=0.0)):
            raise ValueError("H must be symmetric")
        object.__setattr__(self, "H", H)
        g = np.asarray(self.g, dtype=float).reshape(n)
        object.__setattr__(self, "g", g)
        for name in ("lb", "ub"):
            v = getattr(self, name)
            if v is not None:
                v = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
                object.__setattr__(self, name, v)
        if (self.G is None) != (self.h is None):
            raise ValueError("G and h must be given together")
        if self.G is not None:
            G = np.asarray(self.G, dtype=float).reshape(-1, n)
            object.__setattr__(self, "G", G)
            object.__setattr__(self, "h", np.asarray(self.h, dtype=float).reshape(G.shape[0]))

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass(frozen=True)
class QPResult:
    x: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    lam_G: np.ndarray
    kkt_residual: float
    iterations: int


def _stack_constraints(qp: QuadraticProgram):
    """Rows of ``C x >= b`` plus the index maps back to lb/ub/G."""
    n = qp.n
    eye = np.eye(n)
    rows, rhs, tags = [], [], []
    if qp.lb is not None:
        idx = np.nonzero(np.isfinite(qp.lb))[0]
        rows.append(eye[idx])
        rhs.append(qp.lb[idx])
        tags.append(("lb", idx))
    if qp.ub is not None:
        idx = np.nonzero(np.isfinite(qp.ub))[0]
        rows.append(-eye[idx])
        rhs.append(-qp.ub[idx])
        tags.append(("ub", idx))
    if qp.G is not None:
        idx = np.nonzero(np.isfinite(qp.h))[0]
        rows.append(-qp.G[idx])
        rhs.append(-qp.h[idx])
        tags.append(("G", idx))
    if rows:
        C = np.ascontiguousarray(np.vstack(rows))
        b = np.ascontiguousarray(np.concatenate(rhs))
    else:
        C = np.zeros((0, n))
        b = np.zeros(0)
    return C, b, tags


def kkt_residual(qp: QuadraticProgram, x, lam_lb, lam_ub, lam_G) -> float:
    """Max of stationarity, primal violation, dual sign and complementarity residuals."""
    x = np.asarray(x, dtype=float)
    grad = qp.H @ x + qp.g - lam_lb + lam_ub
    parts = []
    primal = [0.0]
    comp = [0.0]
    if qp.lb is not None:
        fin = np.isfinite(qp.lb)
        primal.append(np.max(qp.lb[fin] - x[fin], initial=0.0))
        comp.append(np.max(np.abs(lam_lb[fin] * (x[fin] - qp.lb[fin])), initial=0.0))
    if qp.ub is not None:
        fin = np.isfinite(qp.ub)
        primal.append(np.max(x[fin] - qp.ub[fin], initial=0.0))
        comp.append(np.max(np.abs(lam_ub[fin] * (qp.ub[fin] - x[fin])), initial=0.0))
    if qp.G is not None:
        grad = grad + qp.G.T @ lam_G
        fin = np.isfinite(qp.h)
        slack = qp.h[fin] - qp.G[fin] @ x
        primal.append(np.max(-slack, initial=0.0))
        comp.append(np.max(np.abs(lam_G[fin] * slack), initial=0.0))
    parts.append(np.max(np.abs(grad), initial=0.0))
    parts.append(max(primal))
    parts.append(max(comp))
    dual = min(np.min(lam_lb, initial=0.0), np.min(lam_ub, initial=0.0), np.min(lam_G, initial=0.0))
    parts.append(-dual)
    return float(max(parts))


def solve_qp(qp: QuadraticProgram, tol: float = 1e-8, max_iter: int | None = None) -> QPResult:
    """Solve with the dual active-set kernel and verify the KKT conditions.

    ``tol`` is relative to ``max(1, max|H|, max|g|)``. Raises
    :class:`QPInfeasibleError` for an empty feasible set and :class:`QPError`
    when the iteration cap is hit or the residual check fails.
    """
    n = qp.n
    C, b, tags = _stack_constraints(qp)
    if max_iter is None:
        max_iter = 10 * (n + C.shape[0]) + 100
    scale = max(1.0, float(np.abs(qp.H).max(initial=0.0)), float(np.abs(qp.g).max(initial=0.0)))
    try:
        x, lam, iters, status = kernels.gi_solve(qp.H, qp.g, C, b, tol * 1e-3, int(max_iter))
    except np.linalg.LinAlgError as exc:
        raise QPError(f"Hessian not positive definite: {exc}") from exc
    x = np.asarray(x)
    lam = np.asarray(lam)
    lam_lb, lam_ub, lam_G = np.zeros(n), np.zeros(n), np.zeros(0 if qp.G is None else qp.G.shape[0])
    pos = 0
    for tag, idx in tags:
        target = {"lb": lam_lb, "ub": lam_ub, "G": lam_G}[tag]
        target[idx] = lam[pos:pos + idx.size]
        pos += idx.size
    if status == kernels.QP_INFEASIBLE:
        raise QPInfeasibleError("QP constraints are infeasible", x=x)
    res = kkt_residual(qp, x, lam_lb, lam_ub, lam_G)
    if status == kernels.QP_MAX_ITER:
        raise QPError(f"QP iteration cap {max_iter} reached", x=x, kkt_residual=res)
    if res > tol * scale:
        raise QPError(f"KKT residual {res:.3g} above tolerance {tol * scale:.3g}", x=x, kkt_residual=res)
    return QPResult(x=x, lam_lb=lam_lb, lam_ub=lam_ub, lam_G=lam_G, kkt_residual=res, iterations=int(iters))
