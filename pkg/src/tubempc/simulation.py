"""Closed-loop episodes under three MPC execution policies.

``optimal``  solves from the measured state every step and applies the first
             input at once (no compute latency).
``delayed``  solves from the measured state every ``m`` steps; the result is
             usable only ``m`` steps later and the previous input is held.
``smooth``   tube-based smooth MPC: while the stored plan is being applied,
             the next plan is solved from the predicted state set.
"""
from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .gains import (
    GainSynthesisError,
    InvariantRadiusError,
    TubeGains,
    check_theorem2,
    default_terminal_radius,
    invariant_radius,
    synthesize_tube_gains,
    tighten_constraints,
)
from .linearization import linearize_discrete
from .manipulator import (
    NU,
    NX,
    IntegrationError,
    ManipulatorParams,
    check_constraints,
    initial_state,
    integrate_step,
    lipschitz_constants,
    paper_initial_theta,
    sample_disturbance,
)
from .ocp import InfeasibleTighteningError, OcpSpec, solve_ocp, solve_ocp1_baseline
from .prediction import DisturbedStateSet, deviation_bound, predict_state_set
from .qp import QPError

log = logging.getLogger(__name__)


class Theorem2Violation(RuntimeError):
    pass


class ControllerKind(str, enum.Enum):
    OPTIMAL = "optimal"
    DELAYED = "delayed"
    SMOOTH = "smooth"


@dataclass(frozen=True)
class PositionTask:
    target: tuple = (2.0, 6.0)
    duration: float = 30.0
    name: str = "position"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class TrajectoryTask:
    """Circular arc followed by a straight segment, each run at constant speed.

    The arc is traversed from ``start_angle`` to ``end_angle`` (radians, about
    ``center``); the line runs from the arc end to ``line_end``.
    """

    center: tuple = (2.0, 4.0)
    radius: float = 2.0
    start_angle: float = math.pi
    end_angle: float = math.pi / 2
    line_end: tuple = (4.0, 4.0)
    arc_fraction: float = 0.5
    duration: float = 30.0
    name: str = "trajectory"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0.0 < self.arc_fraction < 1.0:
            raise ValueError("arc_fraction must lie in (0, 1)")

    @property
    def arc_end(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c + self.radius * np.array([math.cos(self.end_angle), math.sin(self.end_angle)])


TaskSpec = PositionTask | TrajectoryTask


def reference_trajectory(task: TaskSpec, t: float) -> np.ndarray:
    """Reference end-point position at time ``t``."""
    if not (0.0 <= t <= task.duration * (1 + 1e-12)):
        raise ValueError(f"t={t} outside [0, {task.duration}]")
    if isinstance(task, PositionTask):
        return np.asarray(task.target, dtype=float)
    t_arc = task.arc_fraction * task.duration
    if t <= t_arc:
        s = t / t_arc
        ang = task.start_angle + s * (task.end_angle - task.start_angle)
        return np.asarray(task.center, dtype=float) + task.radius * np.array([math.cos(ang), math.sin(ang)])
    s = min((t - t_arc) / (task.duration - t_arc), 1.0)
    p0 = task.arc_end
    return p0 + s * (np.asarray(task.line_end, dtype=float) - p0)


def lift_reference(p_ref) -> np.ndarray:
    """Full-state reference: position carried, angles zero (masked out of the cost)."""
    z = np.zeros(NX)
    z[:2] = p_ref
    return z


def ancillary_control(v, z, z_star, K) -> np.ndarray:
    """``u = v + K (z - z_star)``."""
    return np.asarray(v, dtype=float) + np.asarray(K, dtype=float) @ (np.asarray(z, dtype=float) - np.asarray(z_star, dtype=float))


@dataclass(frozen=True)
class SimConfig:
    params: ManipulatorParams = field(default_factory=ManipulatorParams.paper)
    delta: float = 0.1
    horizon: float = 3.0
    m: int = 4
    Q: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(NX))
    R: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(NU))
    eta: float = 0.02
    seed: int = 0
    theorem2_policy: str = "warn"
    cost_mask: bool = True
    epsilon: float | None = None
    initial_theta: tuple | None = None
    rho_accept: float = 0.999
    min_input_authority: float = 0.25
    sqp_max_rounds: int = 10
    qp_tol: float = 1e-8

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.m * self.delta > self.horizon * (1 + 1e-12):
            raise ValueError("m * delta must not exceed the horizon")
        if not 0.0 <= self.min_input_authority < 1.0:
            raise ValueError("min_input_authority must lie in [0, 1)")
        if self.theorem2_policy not in ("warn", "abort"):
            raise ValueError("theorem2_policy must be 'warn' or 'abort'")
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon / self.delta))

    @property
    def Q_cost(self) -> np.ndarray:
        """Stage weight actually used in the tracking cost."""
        if not self.cost_mask:
            return self.Q
        Qm = np.zeros_like(self.Q)
        Qm[:2, :2] = self.Q[:2, :2]
        return Qm

    @property
    def z0(self) -> np.ndarray:
        theta = paper_initial_theta() if self.initial_theta is None else np.asarray(self.initial_theta, dtype=float)
        return initial_state(theta, self.params)


@dataclass
class SimTrace:
    """Per-step record; row ``k`` holds the state at ``t_k`` and the input applied on ``[t_k, t_k+1)``."""

    controller: str
    task: str
    seed: int
    delta: float
    t: np.ndarray
    z: np.ndarray
    z_star: np.ndarray
    u: np.ndarray
    v: np.ndarray
    e: np.ndarray
    stage_cost: np.ndarray
    pos_err: np.ndarray
    viol: np.ndarray
    margin: np.ndarray
    latency: np.ndarray
    measured_step: np.ndarray
    gamma: np.ndarray
    theorem2: list = field(default_factory=list)
    solve_wall_time: list = field(default_factory=list)
    status: str = "ok"
    failure: str | None = None
    failure_step: int | None = None

    def __len__(self) -> int:
        return int(self.t.shape[0])

    @property
    def e_norm(self) -> np.ndarray:
        return np.linalg.norm(self.e, axis=1)


def metrics_summary(trace: SimTrace, steady_fraction: float = 0.5) -> dict:
    if len(trace) == 0:
        raise ValueError("empty trace")
    n = len(trace)
    start = min(int(math.floor(n * (1.0 - steady_fraction))), n - 1)
    lat = trace.latency
    return {
        "final_error": float(trace.pos_err[-1]),
        "mean_error": float(np.mean(trace.pos_err)),
        "steady_state_error": float(np.mean(trace.pos_err[start:])),
        "total_cost": float(trace.delta * np.sum(trace.stage_cost)),
        "violation_count": int(np.sum(trace.viol)),
        "mean_solve_latency_steps": float(np.mean(lat)) if lat.size else 0.0,
    }


class _Episode:
    def __init__(self, config: SimConfig, controller: ControllerKind, task: TaskSpec):
        self.cfg = config
        self.kind = ControllerKind(controller)
        self.task = task
        self.params = config.params
        self.N = config.horizon_steps
        self.steps = int(round(task.duration / config.delta))
        self.l1, _, self.l = lipschitz_constants(self.params)
        self.Qc = config.Q_cost
        self.gains: TubeGains | None = None
        self.theorem2 = []
        # tightening in per-step units: a step of length delta carries
        # at most delta*eta of disturbance and grows deviations by at most 1+delta*l
        self.eta_step = config.delta * config.eta
        self.l_step = config.delta * self.l
        self.r_cap = deviation_bound(config.m, self.eta_step, self.l_step)

    # gains ---------------------------------------------------------------
    def _try_gains(self, z, u):
        model = linearize_discrete(z, u, self.params, self.cfg.delta)
        try:
            g = synthesize_tube_gains(model.Ad, model.Bd, self.cfg.Q, self.cfg.R)
        except GainSynthesisError:
            return model, None
        if g.spectral_radius > self.cfg.rho_accept:
            return model, None
        # the tube correction may not eat more than (1 - min_input_authority) of the input box
        margin = float(np.linalg.norm(g.K, 2)) * self.r_cap
        if margin > (1.0 - self.cfg.min_input_authority) * min(self.params.omega_max):
            return model, None
        return model, g

    def gains_at(self, z, u):
        """Linearize at ``(z, u)``; keep the last accepted gain when synthesis is not usable."""
        model, g = self._try_gains(z, u)
        if g is None and self.gains is None:
            # no history yet: probe with a mid-range input so the pair is controllable
            probe = 0.5 * np.asarray(self.params.omega_max)
            _, g = self._try_gains(z, probe)
            if g is None:
                raise GainSynthesisError("no stabilizing tube gain at the initial state")
        if g is not None:
            self.gains = g
        return model, self.gains

    def terminal(self, gains: TubeGains):
        P = gains.P
        if not self.cfg.cost_mask:
            return P
        # cheapest completion over the unweighted angle coordinates
        S = P[:2, :2] - P[:2, 2:] @ np.linalg.solve(P[2:, 2:], P[2:, :2])
        Pt = np.zeros_like(P)
        Pt[:2, :2] = 0.5 * (S + S.T)
        return Pt

    def epsilon(self, gains: TubeGains, tightened) -> float:
        if self.cfg.epsilon is not None:
            return self.cfg.epsilon
        hw = 0.5 * (tightened.theta_hi[self.N] - tightened.theta_lo[self.N])
        return default_terminal_radius(gains.P, hw)

    def z_ref_horizon(self, k0: int) -> np.ndarray:
        d = self.cfg.delta
        out = np.empty((self.N + 1, NX))
        for i in range(self.N + 1):
            t = min((k0 + i) * d, self.task.duration)
            out[i] = lift_reference(reference_trajectory(self.task, t))
        return out

    def template(self, model, gains, tightened, k0, initial):
        return OcpSpec(
            horizon_steps=self.N,
            delta=self.cfg.delta,
            model=model,
            Q=self.Qc,
            R=self.cfg.R,
            P=self.terminal(gains),
            tightened=tightened,
            initial=initial,
            z_ref=self.z_ref_horizon(k0),
            epsilon=self.epsilon(gains, tightened),
            qp_tol=self.cfg.qp_tol,
        )

    # OCP 1 (measured state, nonlinear model) ------------------------------
    def solve_ocp1(self, z, k0, v_init):
        # terminal weight refreshed once per control period, as for the tube gain
        if self.gains is None or k0 % self.cfg.m == 0:
            u_lin = v_init[0] if v_init is not None else np.zeros(NU)
            model, gains = self.gains_at(z, u_lin)
        else:
            model, gains = None, self.gains
        tight = tighten_constraints(self.params, None, self.N, 0.0, 0.0, cap=0.0, input_radius=0.0)
        # a measured angle already past a bound would make the state rows
        # infeasible; widen that bound to the measurement (zero input keeps
        # the angle put, so the QP stays feasible)
        th = np.asarray(z, dtype=float)[2:]
        tight = replace(tight, theta_lo=np.minimum(tight.theta_lo, th), theta_hi=np.maximum(tight.theta_hi, th))
        spec = self.template(model, gains, tight, k0, z)
        return solve_ocp1_baseline(z, self.params, spec, v_init=v_init, max_rounds=self.cfg.sqp_max_rounds)

    # OCP 2 (predicted set, linearized model, tightened constraints) -------
    def solve_ocp2(self, state_set, u_lin, k0, record_step):
        model, gains = self.gains_at(state_set.center, u_lin)
        if gains.gamma is None:
            gains = replace(gains, gamma=invariant_radius(gains.Acl, self.cfg.eta))
            self.gains = gains
        gamma = gains.gamma
        report = check_theorem2(self.cfg.m, self.cfg.eta, self.l, gains.Acl, gamma=gamma)
        self.theorem2.append((record_step, report))
        if not (report.condition_i and report.condition_ii):
            if self.cfg.theorem2_policy == "abort":
                raise Theorem2Violation(report.format())
            log.debug("tube hypotheses not met at step %d", record_step)
        tight = tighten_constraints(self.params, gains, self.N, self.eta_step, self.l_step,
                                    cap=self.r_cap, input_radius=self.r_cap)
        spec = self.template(model, gains, tight, k0, state_set)
        sol = solve_ocp(spec)
        return sol, replace(gains, gamma=gamma, epsilon=spec.epsilon)


def _shift(v, by):
    return np.vstack([v[by:], np.repeat(v[-1:], by, axis=0)])


def run_episode(config: SimConfig, controller, task: TaskSpec) -> SimTrace:
    """Simulate one episode; solver or integration failures end it with a partial trace."""
    ep = _Episode(config, controller, task)
    cfg, params, m = config, config.params, config.m
    S = ep.steps
    d = cfg.delta
    rng = np.random.default_rng(cfg.seed)
    dist = sample_disturbance(rng, params.eta1, size=S) if params.eta1 > 0 else np.zeros((S, NX))

    z = np.empty((S + 1, NX))
    z_star = np.full((S + 1, NX), np.nan)
    u = np.zeros((S + 1, NU))
    v = np.zeros((S + 1, NU))
    e = np.zeros((S + 1, NX))
    latency = np.zeros(S + 1, dtype=np.int64)
    measured = np.full(S + 1, -1, dtype=np.int64)
    gamma = np.full(S + 1, np.nan)
    walls = []
    z[0] = cfg.z0
    status, failure, failure_step = "ok", None, None
    k = 0

    plan = None        # stored (v*, z_bar*, K, gamma) for the current smooth period
    pending = None     # delayed: (ready_step, input, solve_step, z_bar*)
    held = np.zeros(NU)
    held_meta = (-1, np.full(NX, np.nan))
    v_warm = None

    try:
        if ep.kind is ControllerKind.SMOOTH:
            # offline bootstrap from the initial state
            t0 = time.perf_counter()
            ep.gains_at(z[0], np.zeros(NU))
            point = DisturbedStateSet(center=z[0].copy(), radius=0.0, steps_ahead=0)
            sol, gains = ep.solve_ocp2(point, 0.5 * np.asarray(params.omega_max), 0, 0)
            sol, gains = ep.solve_ocp2(point, sol.v_star[0], 0, 0)
            walls.append(time.perf_counter() - t0)
            plan = (sol.v_star, sol.z_bar_star, gains.K, gains.gamma)
            plan_start = 0

        for k in range(S):
            zk = z[k]
            if ep.kind is ControllerKind.OPTIMAL:
                t0 = time.perf_counter()
                sol = ep.solve_ocp1(zk, k, None if v_warm is None else _shift(v_warm, 1))
                walls.append(time.perf_counter() - t0)
                v_warm = sol.v_star
                uk = sol.v_star[0]
                v[k] = uk
                z_star[k] = sol.z_bar_star[0]
                measured[k] = k
            elif ep.kind is ControllerKind.DELAYED:
                if pending is not None and k == pending[0]:
                    held = pending[1]
                    held_meta = (pending[2], pending[3])
                if k % m == 0:
                    t0 = time.perf_counter()
                    sol = ep.solve_ocp1(zk, k, None if v_warm is None else _shift(v_warm, m))
                    walls.append(time.perf_counter() - t0)
                    v_warm = sol.v_star
                    pending = (k + m, sol.v_star[0].copy(), k, sol.z_bar_star)
                uk = held
                v[k] = uk
                src, zbar = held_meta
                measured[k] = src
                if src >= 0:
                    z_star[k] = zbar[min(k - src, ep.N)]
            else:
                j = k - plan_start
                if j == 0:
                    # apply the stored plan over this period and, in model time,
                    # solve the next one from the predicted set
                    cur_v, cur_z, cur_K, cur_gamma = plan
                    t0 = time.perf_counter()
                    state_set = predict_state_set(zk, cur_v, m, cfg.eta, ep.l, params, d,
                                                  gain=cur_K, plan_states=cur_z)
                    sol, gains = ep.solve_ocp2(state_set, cur_v[m], k + m, k)
                    walls.append(time.perf_counter() - t0)
                    next_plan = (sol.v_star, sol.z_bar_star, gains.K, gains.gamma)
                v[k] = cur_v[j]
                z_star[k] = cur_z[j]
                uk = ancillary_control(cur_v[j], zk, cur_z[j], cur_K)
                gamma[k] = cur_gamma
                measured[k] = plan_start - m if plan_start > 0 else 0
                if j == m - 1:
                    plan = next_plan
                    plan_start = k + 1
            u[k] = uk
            latency[k] = k - measured[k] if measured[k] >= 0 else m
            e[k] = dist[k]
            z[k + 1] = integrate_step(zk, uk, d, params, e=dist[k] if params.eta1 > 0 else None)
        k = S
        if ep.kind is ControllerKind.SMOOTH:
            # the stored plan still covers the final sample
            z_star[S] = plan[1][S - plan_start]
            gamma[S] = plan[3]
    except (QPError, InfeasibleTighteningError, GainSynthesisError, InvariantRadiusError,
            IntegrationError, Theorem2Violation) as exc:
        status, failure, failure_step = "failed", f"{type(exc).__name__}: {exc}", k
        log.warning("episode %s/%s seed %d failed at step %d: %s", ep.kind.value, task.name, cfg.seed, k, exc)

    n = k + 1
    z = z[:n]
    u, v, e = u[:n], v[:n], e[:n]
    if status == "ok":
        u[-1] = 0.0
        v[-1] = 0.0
        e[-1] = 0.0
    t = np.arange(n) * d
    refs = np.array([reference_trajectory(task, min(ti, task.duration)) for ti in t])
    pos_err = np.linalg.norm(z[:, :2] - refs, axis=1)
    zr = np.zeros((n, NX))
    zr[:, :2] = refs
    err = z - zr
    stage = np.einsum("ij,jk,ik->i", err, ep.Qc, err) + np.einsum("ij,jk,ik->i", u, cfg.R, u)
    viol = np.zeros(n, dtype=np.int64)
    margin = np.zeros(n)
    for i in range(n):
        rep = check_constraints(z[i], u[i], params, tol=1e-9)
        viol[i] = 0 if rep.feasible else 1
        margin[i] = rep.min_margin
    latency = latency[:n]
    if status == "ok":
        latency[-1] = 0
    return SimTrace(
        controller=ep.kind.value, task=task.name, seed=cfg.seed, delta=d, t=t, z=z,
        z_star=z_star[:n], u=u, v=v, e=e, stage_cost=stage, pos_err=pos_err, viol=viol,
        margin=margin, latency=latency, measured_step=measured[:n], gamma=gamma[:n],
        theorem2=ep.theorem2, solve_wall_time=walls, status=status, failure=failure,
        failure_step=failure_step,
    )
