"""Affine models of the manipulator kinematics with certified error bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .manipulator import NU, NX, ManipulatorParams, dynamics_nominal, lipschitz_constants, velocity_map


class ZOHConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearModel:
    """``zdot = A z + B u + Omega`` around ``(z0, u0)``.

    The discrete fields are filled by :func:`discretize_zoh`.
    """

    A: np.ndarray
    B: np.ndarray
    Omega: np.ndarray
    z0: np.ndarray
    u0: np.ndarray
    Ad: np.ndarray | None = None
    Bd: np.ndarray | None = None
    Omegad: np.ndarray | None = None
    delta: float | None = None

    @property
    def is_discrete(self) -> bool:
        return self.Ad is not None


@dataclass(frozen=True)
class DisturbanceBudget:
    eta1: float
    etaR: float
    eta2: float
    eta: float

    def capped(self, eta_max: float) -> "DisturbanceBudget":
        """Budget with the linearization share clipped so that ``eta <= eta_max``."""
        eta2 = min(self.eta2, max(eta_max - self.eta1, 0.0))
        return DisturbanceBudget(self.eta1, self.etaR, eta2, self.eta1 + eta2)


def linearize(z0, u0, params: ManipulatorParams) -> LinearModel:
    z0 = np.asarray(z0, dtype=float).copy()
    u0 = np.asarray(u0, dtype=float).copy()
    theta = z0[2:]
    L = params.L
    A = np.zeros((NX, NX))
    A[0, 2:] = -u0 * L * np.cos(theta)
    A[1, 2:] = -u0 * L * np.sin(theta)
    B = velocity_map(theta, params)
    Omega = dynamics_nominal(z0, u0, params) - (A @ z0 + B @ u0)
    return LinearModel(A=A, B=B, Omega=Omega, z0=z0, u0=u0)


def _abs_envelope(center: np.ndarray, radius: float, phase: float) -> np.ndarray:
    """max |sin(t + phase)| for t in [center - radius, center + radius]."""
    out = np.empty_like(center)
    for i, c in enumerate(center):
        a, b = c + phase - radius, c + phase + radius
        # a peak of |sin| sits at pi/2 + k pi
        k = math.ceil((a - math.pi / 2) / math.pi)
        if radius >= math.pi / 2 or math.pi / 2 + k * math.pi <= b:
            out[i] = 1.0
        else:
            out[i] = max(abs(math.sin(a)), abs(math.sin(b)))
    return out


def hessian_bound(z0, u0, params: ManipulatorParams, box_radius_z: float, box_radius_u: float) -> float:
    """Upper bound on the Frobenius norm of the second-derivative tensor of f.

    Valid over ``|theta_i - theta0_i| <= box_radius_z`` and
    ``|omega_i - omega0_i| <= box_radius_u``. Only the x/y rows are curved;
    per link the nonzero second partials are ``L w sin``, ``L w cos`` (twice
    in theta) and ``L sin``, ``L cos`` (mixed theta/omega, counted twice).
    """
    if box_radius_z < 0 or box_radius_u < 0:
        raise ValueError("box radii must be non-negative")
    theta = np.asarray(z0, dtype=float)[2:]
    w = np.abs(np.asarray(u0, dtype=float)) + box_radius_u
    s = _abs_envelope(theta, box_radius_z, 0.0)
    c = _abs_envelope(theta, box_radius_z, math.pi / 2)
    L = params.L
    total = np.sum(L**2 * ((w**2) * (s**2 + c**2) + 2.0 * (s**2 + c**2)))
    return float(math.sqrt(total))


def excursion_bounds(params: ManipulatorParams, delta: float) -> tuple[float, float]:
    """``(dz_max, du_max)``: state travel in one step and input-box diameter."""
    L, wmax = params.L, np.asarray(params.omega_max)
    speed = math.sqrt(float(L @ wmax) ** 2 + float(wmax @ wmax))
    return delta * speed, 2.0 * float(np.linalg.norm(wmax))


def disturbance_budget(model: LinearModel, etaR: float, dz_max: float, du_max: float,
                       eta1: float, l1: float, l2: float) -> DisturbanceBudget:
    if min(etaR, dz_max, du_max, eta1, l1, l2) < 0:
        raise ValueError("budget inputs must be non-negative")
    eta2 = float(np.linalg.norm(model.Omega)) + etaR * (l1 * dz_max + l2 * du_max)
    return DisturbanceBudget(eta1=float(eta1), etaR=float(etaR), eta2=eta2, eta=float(eta1) + eta2)


def certified_budget(z0, u0, params: ManipulatorParams, delta: float) -> tuple[LinearModel, DisturbanceBudget, float, float]:
    """Linearize at ``(z0, u0)`` and bound the error over the one-period excursion box.

    Returns ``(model, budget, dz_max, du_max)``; the box is
    ``|z - z0| <= dz_max``, ``|u - u0| <= du_max`` (Euclidean).
    """
    model = linearize(z0, u0, params)
    dz, du = excursion_bounds(params, delta)
    etaR = hessian_bound(z0, u0, params, dz, du)
    l1, l2, _ = lipschitz_constants(params)
    return model, disturbance_budget(model, etaR, dz, du, params.eta1, l1, l2), dz, du


def sample_linearization_error(model: LinearModel, params: ManipulatorParams, dz_max: float, du_max: float,
                               samples: int, rng: np.random.Generator) -> np.ndarray:
    """``|f(z, u) - (A z + B u + Omega)|`` at points drawn uniformly from the excursion box."""

    def ball(n, dim, r):
        d = rng.standard_normal((n, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * r * rng.random((n, 1)) ** (1.0 / dim)

    z = model.z0 + ball(samples, NX, dz_max)
    u = model.u0 + ball(samples, NU, du_max)
    L = params.L
    th, w = z[:, 2:], u
    f = np.empty_like(z)
    f[:, 0] = -np.sum(L * w * np.sin(th), axis=1)
    f[:, 1] = np.sum(L * w * np.cos(th), axis=1)
    f[:, 2:] = w
    aff = z @ model.A.T + u @ model.B.T + model.Omega
    return np.linalg.norm(f - aff, axis=1)


def _expm_series(X: np.ndarray, max_terms: int = 60) -> np.ndarray:
    """exp of a stack of matrices by scaling and squaring a truncated Taylor series."""
    n = X.shape[-1]
    norm = float(np.max(np.sum(np.abs(X), axis=-2))) if X.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    Y = X / (2.0**s)
    out = np.broadcast_to(np.eye(n), X.shape).copy()
    term = out.copy()
    ynorm = norm / (2.0**s)
    for k in range(1, max_terms + 1):
        term = term @ Y / k
        if not term.any():
            break  # nilpotent: the series is exact
        out = out + term
        # remaining tail is at most twice the next term for ||Y|| <= 1/2
        if 2.0 * ynorm ** (k + 1) / math.factorial(k + 1) < 1e-17:
            break
    else:
        raise ZOHConvergenceError("matrix-exponential series did not converge")
    for _ in range(s):
        out = out @ out
    return out


def zoh(A, B, c, delta: float):
    """Exact discretization of ``zdot = A z + B u + c`` under held inputs.

    Accepts stacks: ``A`` (..., n, n), ``B`` (..., n, m), ``c`` (..., n).
    Returns ``(Ad, Bd, cd)``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    c = np.asarray(c, dtype=float)
    n, m = A.shape[-1], B.shape[-1]
    size = n + m + 1
    M = np.zeros(A.shape[:-2] + (size, size))
    M[..., :n, :n] = A
    M[..., :n, n:n + m] = B
    M[..., :n, n + m] = c
    E = _expm_series(M * delta)
    return E[..., :n, :n].copy(), E[..., :n, n:n + m].copy(), E[..., :n, n + m].copy()


def discretize_zoh(model: LinearModel, delta: float) -> LinearModel:
    Ad, Bd, Omegad = zoh(model.A, model.B, model.Omega, delta)
    return replace(model, Ad=Ad, Bd=Bd, Omegad=Omegad, delta=float(delta))


def linearize_discrete(z0, u0, params: ManipulatorParams, delta: float) -> LinearModel:
    return discretize_zoh(linearize(z0, u0, params), delta)


def linearize_along(states, controls, params: ManipulatorParams):
    """Continuous Jacobians along a trajectory: returns stacks ``(A, B)``.

    ``states`` has shape (N, 5) and ``controls`` (N, 3).
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    theta = states[:, 2:]
    L = params.L
    N = states.shape[0]
    A = np.zeros((N, NX, NX))
    A[:, 0, 2:] = -controls * L * np.cos(theta)
    A[:, 1, 2:] = -controls * L * np.sin(theta)
    B = np.zeros((N, NX, NU))
    B[:, 0] = -L * np.sin(theta)
    B[:, 1] = L * np.cos(theta)
    B[:, 2:] = np.eye(NU)
    return A, B
