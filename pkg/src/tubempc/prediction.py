"""Real-versus-nominal deviation bound and the predictive disturbed state set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .manipulator import NU, NX, ManipulatorParams, integrate_step, lipschitz_constants, sample_disturbance


@dataclass(frozen=True)
class DisturbedStateSet:
    """Euclidean ball around the m-step nominal prediction."""

    center: np.ndarray
    radius: float
    steps_ahead: int

    def contains(self, z, tol: float = 0.0) -> bool:
        return bool(np.linalg.norm(np.asarray(z) - self.center) <= self.radius + tol)


def deviation_bound(m: int, eta: float, l: float) -> float:
    """``m * eta * (1 + l)**m``."""
    if m < 0 or int(m) != m:
        raise ValueError("m must be a non-negative integer")
    if eta < 0 or l < 0:
        raise ValueError("eta and l must be non-negative")
    return float(m * eta * (1.0 + l) ** m)


def predict_state_set(z_k, control_seq, m: int, eta: float, l: float,
                      params: ManipulatorParams, delta: float,
                      gain=None, plan_states=None) -> DisturbedStateSet:
    """Roll the nominal model ``m`` steps from ``z_k`` and wrap it in the deviation ball.

    With ``gain`` and ``plan_states`` given, step ``j`` applies
    ``control_seq[j] + gain @ (z_j - plan_states[j])``, i.e. the same ancillary
    law the real loop will run.
    """
    control_seq = np.asarray(control_seq, dtype=float).reshape(-1, NU)
    if control_seq.shape[0] < m:
        raise ValueError(f"need {m} controls, got {control_seq.shape[0]}")
    z = np.asarray(z_k, dtype=float).copy()
    for j in range(m):
        u = control_seq[j]
        if gain is not None:
            u = u + gain @ (z - plan_states[j])
        z = integrate_step(z, u, delta, params)
    return DisturbedStateSet(center=z, radius=deviation_bound(m, eta, l), steps_ahead=int(m))


@dataclass(frozen=True)
class ContainmentReport:
    m: int
    samples: int
    radius: float
    max_deviation: float
    failures: int


def containment_monte_carlo(z0, params: ManipulatorParams, delta: float, eta: float, m: int,
                            samples: int, rng: np.random.Generator) -> ContainmentReport:
    """Disturbed versus nominal rollouts over ``m`` steps from ``z0``.

    Each sample draws its own input sequence uniformly from the input box and
    a disturbance of norm at most ``eta`` per step; a failure is a real state
    outside the ball of radius ``deviation_bound(m, eta, l)``.
    """
    wmax = np.asarray(params.omega_max)
    controls = rng.uniform(-wmax, wmax, size=(samples, m, NU))
    dist = sample_disturbance(rng, eta, size=samples * m).reshape(samples, m, NX)
    start = np.tile(np.asarray(z0, dtype=float), (samples, 1))
    real = kernels.rk4_rollout(start, controls, delta, params.L, dist)[:, -1]
    nominal = kernels.rk4_rollout(start, controls, delta, params.L)[:, -1]
    dev = np.linalg.norm(real - nominal, axis=1)
    radius = deviation_bound(m, eta, lipschitz_constants(params)[2])
    return ContainmentReport(m=int(m), samples=int(samples), radius=radius,
                             max_deviation=float(dev.max(initial=0.0)), failures=int(np.sum(dev > radius)))
