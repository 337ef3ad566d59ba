"""Tube feedback gain, Lyapunov weight, invariant radius and constraint tightening."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .manipulator import ManipulatorParams
from .prediction import deviation_bound

log = logging.getLogger(__name__)


class GainSynthesisError(RuntimeError):
    pass


class NotStabilizableError(GainSynthesisError):
    pass


class InvariantRadiusError(RuntimeError):
    pass


@dataclass(frozen=True)
class TubeGains:
    K: np.ndarray
    P: np.ndarray
    Qstar: np.ndarray
    Acl: np.ndarray
    gamma: float | None = None
    epsilon: float | None = None

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Acl))))

    def lyapunov_residual(self) -> np.ndarray:
        """Eigenvalues of ``Acl' P Acl - P + Qstar`` (all <= 0 certifies the decrease)."""
        M = self.Acl.T @ self.P @ self.Acl - self.P + self.Qstar
        return np.linalg.eigvalsh(0.5 * (M + M.T))


@dataclass(frozen=True)
class TightenedSets:
    """Per-step joint-angle bounds (shape (N+1, 3)) and the tightened input box."""

    theta_lo: np.ndarray
    theta_hi: np.ndarray
    omega_lo: np.ndarray
    omega_hi: np.ndarray
    radii: np.ndarray
    input_margin: float
    feasible: np.ndarray
    input_feasible: bool

    @property
    def all_feasible(self) -> bool:
        return bool(self.feasible.all() and self.input_feasible)


@dataclass(frozen=True)
class Theorem2Report:
    condition_i: bool
    condition_ii: bool
    lhs: float
    rhs: float
    eigenvalues: np.ndarray
    spectral_radius: float

    def format(self) -> str:
        eig = ", ".join(f"{complex(e):.6g}" for e in self.eigenvalues)
        return (
            f"condition (i)  rho(Acl) = {self.spectral_radius:.12g} < 1: {self.condition_i}\n"
            f"  eigenvalues: [{eig}]\n"
            f"condition (ii) m*eta*(1+l)^m = {self.lhs:.12g} <= gamma = {self.rhs:.12g}: {self.condition_ii}"
        )


def pbh_margin(Ad, Bd, unit_tol: float = 1e-6) -> float:
    """Smallest PBH singular value over the eigenvalues with ``|lambda| >= 1 - unit_tol``.

    Normalized by ``||[Ad Bd]||``. Returns ``inf`` when Ad is strictly stable.
    """
    Ad = np.asarray(Ad, dtype=float)
    Bd = np.asarray(Bd, dtype=float)
    n = Ad.shape[0]
    scale = max(np.linalg.norm(np.hstack([Ad, Bd]), 2), 1e-300)
    worst = np.inf
    for lam in np.linalg.eigvals(Ad):
        if abs(lam) < 1 - unit_tol:
            continue
        M = np.hstack([lam * np.eye(n) - Ad, Bd])
        worst = min(worst, np.linalg.svd(M, compute_uv=False)[-1] / scale)
    return float(worst)


def solve_dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Stabilizing DARE solution by the structure-preserving doubling iteration.

    Iterates to a fixed point of ``H_{k+1} = H_k + A_k' H_k (I + G_k H_k)^{-1} A_k``
    and checks the Riccati residual against ``tol`` (relative to ``max(1, ||P||)``).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = A.shape[0]
    I = np.eye(n)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for _ in range(max_iter):
        W = I + Gk @ Hk
        WAG = np.linalg.solve(W, np.hstack([Ak, Gk]))
        WA, WG = WAG[:, :n], WAG[:, n:]
        H_next = Hk + Ak.T @ Hk @ WA
        G_next = Gk + Ak @ WG @ Ak.T
        A_next = Ak @ WA
        H_next = 0.5 * (H_next + H_next.T)
        G_next = 0.5 * (G_next + G_next.T)
        if not np.all(np.isfinite(H_next)):
            raise GainSynthesisError("Riccati iteration diverged")
        step = np.linalg.norm(H_next - Hk)
        Ak, Gk, Hk = A_next, G_next, H_next
        if step <= 1e-15 * max(1.0, np.linalg.norm(Hk)):
            break
    else:
        raise GainSynthesisError(f"Riccati iteration did not converge in {max_iter} doublings")
    P = Hk
    res = riccati_residual(A, B, Q, R, P)
    if res > tol * max(1.0, np.linalg.norm(P)):
        raise GainSynthesisError(f"Riccati residual {res:.3g} above tolerance")
    return P


def riccati_residual(A, B, Q, R, P) -> float:
    BtPA = B.T @ P @ A
    M = A.T @ P @ A - P - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.max(np.abs(M)))


def synthesize_tube_gains(Ad, Bd, Q, R, tol: float = 1e-10, stab_tol: float = 1e-6) -> TubeGains:
    """Infinite-horizon LQR gain ``K`` (``u = K z``) and Riccati weight ``P``.

    Raises :class:`NotStabilizableError` when the PBH margin of ``(Ad, Bd)``
    falls below ``stab_tol``, and :class:`GainSynthesisError` when the Riccati
    iteration fails or the closed loop is not a strict contraction.
    """
    Ad = np.asarray(Ad, dtype=float)
    Bd = np.asarray(Bd, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if np.min(np.linalg.eigvalsh(R)) <= 0:
        raise ValueError("R must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ValueError("Q must be positive semi-definite")
    margin = pbh_margin(Ad, Bd)
    if margin < stab_tol:
        raise NotStabilizableError(f"(Ad, Bd) not stabilizable (PBH margin {margin:.3g})")
    P = solve_dare(Ad, Bd, Q, R, tol=tol)
    K = -np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    Acl = Ad + Bd @ K
    gains = TubeGains(K=K, P=P, Qstar=Q + K.T @ R @ K, Acl=Acl)
    rho = gains.spectral_radius
    if rho >= 1.0:
        raise GainSynthesisError(f"closed loop not stable (rho = {rho:.12g})")
    if np.min(np.linalg.eigvalsh(P)) <= 0:
        raise GainSynthesisError("Riccati weight is not positive definite")
    lyap = gains.lyapunov_residual()
    if lyap.max() > 1e-8 * max(1.0, np.linalg.norm(P)):
        raise GainSynthesisError(f"Lyapunov residual {lyap.max():.3g} above tolerance")
    return gains


def invariant_radius(Acl, eta: float, rel_tol: float = 1e-12, max_terms: int = 2_000_000) -> float:
    """``eta * sum_i ||Acl^i||_2`` truncated once a term drops below ``rel_tol * eta``."""
    Acl = np.asarray(Acl, dtype=float)
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl)))) if Acl.size else 0.0
    if rho >= 1.0:
        raise InvariantRadiusError(f"series diverges (rho = {rho:.12g})")
    if eta < 0:
        raise ValueError("eta must be non-negative")
    total, _, converged = kernels.spectral_norm_series(Acl, rel_tol, int(max_terms))
    if not converged:
        raise InvariantRadiusError(f"series not converged after {max_terms} terms (rho = {rho:.12g})")
    return total * eta


def with_invariant_radius(gains: TubeGains, eta: float, **kwargs) -> TubeGains:
    return replace(gains, gamma=invariant_radius(gains.Acl, eta, **kwargs))


def tighten_constraints(params: ManipulatorParams, gains: TubeGains | None, horizon_steps: int,
                        eta: float, l: float, cap: float | None = None,
                        input_radius: float | None = None) -> TightenedSets:
    """Shrink the joint box at step ``i`` by ``min(i*eta*(1+l)**i, cap)`` and the
    input box by ``||K||_2 * input_radius``.

    ``cap`` and ``input_radius`` default to ``gains.gamma``. Steps whose
    interval empties are flagged, never clamped.
    """
    if cap is None:
        cap = gains.gamma if gains is not None and gains.gamma is not None else np.inf
    if input_radius is None:
        input_radius = gains.gamma if gains is not None and gains.gamma is not None else 0.0
    lo = np.asarray(params.theta_lo)
    hi = np.asarray(params.theta_hi)
    radii = np.array([min(deviation_bound(i, eta, l), cap) for i in range(horizon_steps + 1)])
    theta_lo = lo[None, :] + radii[:, None]
    theta_hi = hi[None, :] - radii[:, None]
    feasible = np.all(theta_lo <= theta_hi, axis=1)
    k_norm = float(np.linalg.norm(gains.K, 2)) if gains is not None else 0.0
    margin = k_norm * float(input_radius)
    wmax = np.asarray(params.omega_max)
    omega_hi = wmax - margin
    return TightenedSets(
        theta_lo=theta_lo,
        theta_hi=theta_hi,
        omega_lo=-omega_hi,
        omega_hi=omega_hi,
        radii=radii,
        input_margin=margin,
        feasible=feasible,
        input_feasible=bool(np.all(omega_hi >= 0.0)),
    )


def check_theorem2(m: int, eta: float, l: float, Acl, gamma: float | None = None) -> Theorem2Report:
    """Evaluate both hypotheses; never raises on failure (report only).

    ``gamma`` may pass in an already computed ``invariant_radius(Acl, eta)``.
    """
    Acl = np.asarray(Acl, dtype=float)
    eig = np.linalg.eigvals(Acl)
    rho = float(np.max(np.abs(eig)))
    lhs = deviation_bound(m, eta, l)
    if gamma is not None:
        rhs = gamma
    else:
        try:
            rhs = invariant_radius(Acl, eta)
        except InvariantRadiusError:
            rhs = np.inf
    return Theorem2Report(
        condition_i=rho < 1.0,
        condition_ii=bool(lhs <= rhs),
        lhs=lhs,
        rhs=float(rhs),
        eigenvalues=eig,
        spectral_radius=rho,
    )


def default_terminal_radius(P, theta_halfwidth) -> float:
    """Largest ``eps`` whose ellipsoid ``{e : ||e||_P <= eps}`` fits the joint half-widths.

    The extent of the ellipsoid along coordinate ``j`` is ``eps * sqrt((P^-1)_jj)``;
    only the joint-angle coordinates (2..4) carry box bounds.
    """
    Pinv = np.linalg.inv(np.asarray(P, dtype=float))
    extent = np.sqrt(np.diag(Pinv)[2:])
    hw = np.asarray(theta_halfwidth, dtype=float)
    return float(np.min(hw / extent))
