"""Planar three-link manipulator: kinematics, constraints, disturbances.

State ``z = (x, y, theta1, theta2, theta3)`` holds the end-point position and
the absolute link angles (measured from the positive x-axis, counter-clockwise
positive). Input ``u = (omega1, omega2, omega3)`` holds the link angular
velocities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import rk4_rollout

NX = 5
NU = 3


class IntegrationError(RuntimeError):
    """Raised when an integration step produces a non-finite state."""


@dataclass(frozen=True)
class ManipulatorParams:
    """Link lengths, joint-angle box, input bound and disturbance bound."""

    lengths: tuple[float, float, float]
    theta_lo: tuple[float, float, float]
    theta_hi: tuple[float, float, float]
    omega_max: tuple[float, float, float]
    eta1: float = 0.0

    def __post_init__(self):
        for name in ("lengths", "theta_lo", "theta_hi", "omega_max"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise ValueError(f"{name} must have three entries")
            if not all(math.isfinite(v) for v in value):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, value)
        if min(self.lengths) <= 0:
            raise ValueError("link lengths must be positive")
        if any(lo >= hi for lo, hi in zip(self.theta_lo, self.theta_hi)):
            raise ValueError("theta_lo must be strictly below theta_hi")
        if min(self.omega_max) <= 0:
            raise ValueError("omega_max must be positive")
        if not (self.eta1 >= 0 and math.isfinite(self.eta1)):
            raise ValueError("eta1 must be a finite non-negative number")
        object.__setattr__(self, "eta1", float(self.eta1))

    @property
    def L(self) -> np.ndarray:
        return np.asarray(self.lengths)

    @classmethod
    def paper(cls, eta1: float = 0.01) -> "ManipulatorParams":
        s5, s10 = math.sqrt(5.0), math.sqrt(10.0)
        w = math.pi / 16
        return cls(
            lengths=(s5, s5, s10),
            theta_lo=(math.pi / 2, 0.0, 0.0),
            theta_hi=(math.pi, math.pi, math.pi / 2),
            omega_max=(w, w, w),
            eta1=eta1,
        )


def paper_initial_theta() -> np.ndarray:
    return np.array([
        math.pi / 2 + math.asin(2 / math.sqrt(5)),
        math.pi / 2 + math.asin(1 / math.sqrt(5)),
        math.asin(1 / math.sqrt(10)),
    ])


def initial_state(theta, params: ManipulatorParams) -> np.ndarray:
    """Consistent state: end point from forward kinematics of ``theta``."""
    theta = np.asarray(theta, dtype=float)
    return np.concatenate([forward_kinematics(theta, params), theta])


def velocity_map(theta, params: ManipulatorParams) -> np.ndarray:
    """The 5x3 matrix T(theta) with ``zdot = T(theta) u``."""
    theta = np.asarray(theta, dtype=float)
    L = params.L
    T = np.zeros((NX, NU))
    T[0] = -L * np.sin(theta)
    T[1] = L * np.cos(theta)
    T[2:] = np.eye(NU)
    return T


def dynamics_nominal(z, u, params: ManipulatorParams) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return velocity_map(z[2:], params) @ np.asarray(u, dtype=float)


def forward_kinematics(theta, params: ManipulatorParams) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    L = params.L
    return np.array([L @ np.cos(theta), L @ np.sin(theta)])


def integrate_step(z, u, delta: float, params: ManipulatorParams, e=None) -> np.ndarray:
    """Advance one RK4 step of length ``delta``, then add ``delta * e``.

    The disturbance is held constant over the step. Raises
    :class:`IntegrationError` on a non-finite result.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    z = np.asarray(z, dtype=float).reshape(1, NX)
    u = np.asarray(u, dtype=float).reshape(1, 1, NU)
    dist = None
    if e is not None:
        e = np.asarray(e, dtype=float)
        if np.linalg.norm(e) > params.eta1 * (1 + 1e-12) + 1e-15:
            raise ValueError(f"disturbance norm {np.linalg.norm(e):.3g} exceeds eta1={params.eta1:.3g}")
        dist = e.reshape(1, 1, NX)
    out = rk4_rollout(z, u, delta, params.L, dist)[0, 1]
    if not np.all(np.isfinite(out)):
        raise IntegrationError("integration produced a non-finite state")
    return out


def rollout(z0, controls, delta: float, params: ManipulatorParams, disturbances=None) -> np.ndarray:
    """Integrate a control sequence of shape (N, 3); returns (N + 1, 5) states."""
    controls = np.asarray(controls, dtype=float).reshape(1, -1, NU)
    dist = None if disturbances is None else np.asarray(disturbances, dtype=float).reshape(1, -1, NX)
    out = rk4_rollout(np.asarray(z0, dtype=float).reshape(1, NX), controls, delta, params.L, dist)[0]
    if not np.all(np.isfinite(out)):
        raise IntegrationError("integration produced a non-finite state")
    return out


def lipschitz_constants(params: ManipulatorParams) -> tuple[float, float, float]:
    """Return ``(l1, l2, l)`` with ``l1 = max L_i``, ``l2 = 1`` and ``l = l1 + 1``."""
    l1 = max(params.lengths)
    l2 = 1.0
    return l1, l2, l1 + 1.0


def sample_disturbance(rng: np.random.Generator, eta1: float, size: int | None = None) -> np.ndarray:
    """Draw uniformly from the closed 5-ball of radius ``eta1``.

    With ``size`` given, returns an array of shape ``(size, 5)``.
    """
    if eta1 < 0:
        raise ValueError("eta1 must be non-negative")
    n = 1 if size is None else int(size)
    direction = rng.standard_normal((n, NX))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    radius = eta1 * rng.random((n, 1)) ** (1.0 / NX)
    out = direction / norms * radius
    # rounding can push the norm a hair past eta1
    over = np.linalg.norm(out, axis=1) > eta1
    if np.any(over):
        out[over] *= eta1 / np.linalg.norm(out[over], axis=1, keepdims=True) * (1 - 1e-15)
    return out[0] if size is None else out


@dataclass(frozen=True)
class ConstraintReport:
    theta_ok: np.ndarray
    theta_margin: np.ndarray
    omega_ok: np.ndarray
    omega_margin: np.ndarray

    @property
    def feasible(self) -> bool:
        return bool(self.theta_ok.all() and self.omega_ok.all())

    @property
    def min_margin(self) -> float:
        return float(min(self.theta_margin.min(), self.omega_margin.min()))


def check_constraints(z, u, params: ManipulatorParams, tol: float = 0.0) -> ConstraintReport:
    """Component-wise joint-angle and input-bound check.

    Margins are distances to the nearest bound, negative when violated.
    ``tol`` absorbs rounding when deciding feasibility.
    """
    theta = np.asarray(z, dtype=float)[2:]
    u = np.asarray(u, dtype=float)
    lo, hi = np.asarray(params.theta_lo), np.asarray(params.theta_hi)
    wmax = np.asarray(params.omega_max)
    theta_margin = np.minimum(theta - lo, hi - theta)
    omega_margin = wmax - np.abs(u)
    return ConstraintReport(
        theta_ok=theta_margin >= -tol,
        theta_margin=theta_margin,
        omega_ok=omega_margin >= -tol,
        omega_margin=omega_margin,
    )
