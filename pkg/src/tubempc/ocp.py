"""Finite-horizon tracking OCPs condensed into QPs over the control sequence."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .gains import TightenedSets
from .linearization import LinearModel, linearize_along
from .manipulator import NU, NX, ManipulatorParams, rollout
from .prediction import DisturbedStateSet
from .qp import QuadraticProgram, solve_qp

log = logging.getLogger(__name__)


class InfeasibleTighteningError(ValueError):
    pass


def total_cost(z_seq, v_seq, z_ref, Q, R, P, delta: float = 1.0) -> float:
    """``delta * sum_i (|z_i - r_i|_Q^2 + |v_i|_R^2) + |z_N - r_N|_P^2``."""
    z = np.atleast_2d(np.asarray(z_seq, dtype=float))
    v = np.asarray(v_seq, dtype=float).reshape(z.shape[0] - 1, -1)
    e = z - np.atleast_2d(np.asarray(z_ref, dtype=float))
    Q, R, P = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Q, R, P))
    stage = np.einsum("ij,jk,ik->", e[:-1], Q, e[:-1]) + np.einsum("ij,jk,ik->", v, R, v)
    return float(delta * stage + e[-1] @ P @ e[-1])


@dataclass(frozen=True)
class OcpSpec:
    """One OCP instance.

    ``model`` is either a discretized :class:`LinearModel` (time invariant) or
    a tuple ``(Ad, Bd, cd)`` of per-step stacks for a time-varying model.
    ``initial`` is a state or a :class:`DisturbedStateSet` (solved from its center).
    """

    horizon_steps: int
    delta: float
    model: object
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    tightened: TightenedSets
    initial: object
    z_ref: np.ndarray
    epsilon: float = np.inf
    max_rounds: int = 8
    qp_tol: float = 1e-8

    def __post_init__(self):
        N = int(self.horizon_steps)
        if N < 1:
            raise ValueError("horizon_steps must be at least 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        z_ref = np.asarray(self.z_ref, dtype=float)
        if z_ref.ndim == 1:
            z_ref = np.tile(z_ref, (N + 1, 1))
        if z_ref.shape[0] != N + 1:
            raise ValueError(f"z_ref needs {N + 1} rows, got {z_ref.shape[0]}")
        object.__setattr__(self, "z_ref", z_ref)
        if self.tightened.theta_lo.shape[0] < N + 1:
            raise ValueError("tightened sets shorter than the horizon")
        if np.min(np.linalg.eigvalsh(np.atleast_2d(self.R))) <= 0:
            raise ValueError("R must be positive definite")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")

    @property
    def z0(self) -> np.ndarray:
        if isinstance(self.initial, DisturbedStateSet):
            return np.asarray(self.initial.center, dtype=float)
        return np.asarray(self.initial, dtype=float)

    def model_stacks(self):
        N = self.horizon_steps
        if isinstance(self.model, LinearModel):
            if not self.model.is_discrete:
                raise ValueError("model must be discretized")
            m = self.model
            return (np.broadcast_to(m.Ad, (N,) + m.Ad.shape), np.broadcast_to(m.Bd, (N,) + m.Bd.shape),
                    np.broadcast_to(m.Omegad, (N,) + m.Omegad.shape))
        Ad, Bd, cd = (np.asarray(a, dtype=float) for a in self.model)
        if Ad.shape[0] != N or Bd.shape[0] != N or cd.shape[0] != N:
            raise ValueError("time-varying model stacks must have horizon_steps entries")
        return Ad, Bd, cd


@dataclass(frozen=True)
class OcpSolution:
    v_star: np.ndarray
    z_bar_star: np.ndarray
    J: float
    kkt_residual: float
    iterations: int
    terminal_in_set: bool
    penalty_weight_used: float
    terminal_norm: float
    escalation: tuple = ()
    sqp_log: tuple = field(default=())


@dataclass(frozen=True)
class CondensedQP:
    """The QP plus what is needed to rebuild it with a rescaled terminal weight."""

    qp: QuadraticProgram
    free: np.ndarray     # (N+1, 5) zero-input response
    Su: np.ndarray       # (N+1, 5, N*3) input-to-state map
    H_stage: np.ndarray
    g_stage: np.ndarray
    const_stage: float


def _condense(Ad, Bd, cd, z0):
    N = Ad.shape[0]
    nv = N * NU
    free = np.empty((N + 1, NX))
    Su = np.zeros((N + 1, NX, nv))
    free[0] = z0
    for i in range(N):
        free[i + 1] = Ad[i] @ free[i] + cd[i]
        np.matmul(Ad[i], Su[i], out=Su[i + 1])
        Su[i + 1, :, i * NU:(i + 1) * NU] = Bd[i]
    return free, Su


def build_condensed_qp(spec: OcpSpec, terminal_scale: float = 1.0) -> CondensedQP:
    """Eliminate the states and expand the cost into ``0.5 v'Hv + g'v + const``."""
    N = spec.horizon_steps
    ts = spec.tightened
    bad = np.nonzero(~ts.feasible[1:N + 1])[0]
    if bad.size:
        raise InfeasibleTighteningError(f"tightened state set is empty at horizon step {int(bad[0]) + 1}")
    if not ts.input_feasible:
        raise InfeasibleTighteningError("tightened input set is empty")
    Ad, Bd, cd = spec.model_stacks()
    free, Su = _condense(Ad, Bd, cd, spec.z0)
    Q = np.asarray(spec.Q, dtype=float)
    R = np.asarray(spec.R, dtype=float)
    err = free - spec.z_ref
    d = spec.delta
    # stage part over z_1..z_{N-1}
    nv = N * NU
    S_mid = Su[1:N]
    QS = (Q @ S_mid).reshape(-1, nv)
    H_stage = 2.0 * d * (S_mid.reshape(-1, nv).T @ QS)
    diag = np.arange(N)
    H_stage.reshape(N, NU, N, NU)[diag, :, diag, :] += 2.0 * d * R
    g_stage = 2.0 * d * (QS.T @ err[1:N].reshape(-1))
    const_stage = float(d * np.einsum("ia,ab,ib->", err[:N], Q, err[:N]))
    cq = CondensedQP(qp=None, free=free, Su=Su, H_stage=H_stage, g_stage=g_stage, const_stage=const_stage)
    return replace(cq, qp=_assemble(spec, cq, terminal_scale))


def _assemble(spec: OcpSpec, cq: CondensedQP, terminal_scale: float) -> QuadraticProgram:
    N = spec.horizon_steps
    ts = spec.tightened
    P = terminal_scale * np.asarray(spec.P, dtype=float)
    SN = cq.Su[N]
    eN = cq.free[N] - spec.z_ref[N]
    H = cq.H_stage + 2.0 * SN.T @ P @ SN
    H = 0.5 * (H + H.T)
    g = cq.g_stage + 2.0 * SN.T @ P @ eN
    lb = np.tile(ts.omega_lo, N)
    ub = np.tile(ts.omega_hi, N)
    # joint-angle rows for z_1..z_N
    St = cq.Su[1:N + 1, 2:, :].reshape(-1, N * NU)
    ft = cq.free[1:N + 1, 2:].reshape(-1)
    hi = ts.theta_hi[1:N + 1].reshape(-1)
    lo = ts.theta_lo[1:N + 1].reshape(-1)
    G = np.vstack([St, -St])
    h = np.concatenate([hi - ft, ft - lo])
    return QuadraticProgram(H=H, g=g, lb=lb, ub=ub, G=G, h=h)


def _terminal_norm(P, z_N, r_N) -> float:
    e = z_N - r_N
    return float(np.sqrt(max(e @ P @ e, 0.0)))


def solve_ocp(spec: OcpSpec) -> OcpSolution:
    """Solve, then escalate the terminal weight by 10x until ``|z_N - r_N|_P <= epsilon``.

    At most ``spec.max_rounds`` solves. If membership never holds, the solve
    with the smallest terminal norm is returned with ``terminal_in_set=False``.
    ``J`` is always evaluated with the unscaled weight.
    """
    N = spec.horizon_steps
    cq = build_condensed_qp(spec)
    P = np.asarray(spec.P, dtype=float)
    best = None
    trace = []
    total_iters = 0
    for k in range(spec.max_rounds):
        scale = 10.0**k
        qp = cq.qp if k == 0 else _assemble(spec, cq, scale)
        res = solve_qp(qp, tol=spec.qp_tol)
        total_iters += res.iterations
        z = cq.free + cq.Su @ res.x
        tn = _terminal_norm(P, z[N], spec.z_ref[N])
        inside = tn <= spec.epsilon
        trace.append((scale, tn))
        if best is None or tn < best[2] or inside:
            best = (res, z, tn, scale)
        if inside:
            break
    res, z, tn, scale = best
    v = res.x.reshape(N, NU)
    J = total_cost(z, v, spec.z_ref, spec.Q, spec.R, P, spec.delta)
    return OcpSolution(
        v_star=v,
        z_bar_star=z,
        J=J,
        kkt_residual=res.kkt_residual,
        iterations=total_iters,
        terminal_in_set=bool(tn <= spec.epsilon),
        penalty_weight_used=scale,
        terminal_norm=tn,
        escalation=tuple(trace),
    )


def _field(z, u, params: ManipulatorParams) -> np.ndarray:
    th = z[:, 2:]
    L = params.L
    out = np.empty_like(z)
    out[:, 0] = -np.sum(L * u * np.sin(th), axis=1)
    out[:, 1] = np.sum(L * u * np.cos(th), axis=1)
    out[:, 2:] = u
    return out


def rk4_step_jacobians(states, controls, params: ManipulatorParams, delta: float):
    """Exact derivatives of one RK4 step w.r.t. its start state and input.

    Returns stacks ``(Phi, Gam)`` of shape (N, 5, 5) and (N, 5, 3), obtained by
    chaining the field Jacobians through the four stages.
    """
    z = np.asarray(states, dtype=float)
    u = np.asarray(controls, dtype=float)
    h = delta
    eye = np.broadcast_to(np.eye(NX), (z.shape[0], NX, NX))
    dz_z, dz_u = eye, np.zeros((z.shape[0], NX, NU))
    Phi, Gam = eye.copy(), np.zeros_like(dz_u)
    zs = z
    for w, c in ((1.0, 0.5), (2.0, 0.5), (2.0, 1.0), (1.0, None)):
        A, B = linearize_along(zs, u, params)
        kz = A @ dz_z
        ku = A @ dz_u + B
        Phi = Phi + (h * w / 6.0) * kz
        Gam = Gam + (h * w / 6.0) * ku
        if c is not None:
            zs = z + c * h * _field(zs, u, params)
            dz_z = eye + c * h * kz
            dz_u = c * h * ku
    return Phi, Gam


def ltv_along(z_traj, v_seq, params: ManipulatorParams, delta: float):
    """Discrete affine models along a trajectory, exact at the trajectory itself.

    ``Ad_i, Bd_i`` are the derivatives of the RK4 step at ``(z_i, v_i)`` and
    the offsets make ``Ad_i z_i + Bd_i v_i + c_i`` reproduce the step, so the
    model has zero defect and the true gradient on the current iterate.
    """
    z_traj = np.asarray(z_traj, dtype=float)
    v_seq = np.asarray(v_seq, dtype=float)
    Ad, Bd = rk4_step_jacobians(z_traj[:-1], v_seq, params, delta)
    c = z_traj[1:] - np.einsum("iab,ib->ia", Ad, z_traj[:-1]) - np.einsum("iab,ib->ia", Bd, v_seq)
    return Ad, Bd, c


def _merit(z, v, spec: OcpSpec, mu: float) -> float:
    """Nonlinear cost plus an exact L1 penalty on joint-bound violations."""
    N = spec.horizon_steps
    J = total_cost(z, v, spec.z_ref, spec.Q, spec.R, spec.P, spec.delta)
    th = z[1:N + 1, 2:]
    ts = spec.tightened
    viol = np.maximum(ts.theta_lo[1:N + 1] - th, 0.0) + np.maximum(th - ts.theta_hi[1:N + 1], 0.0)
    return J + mu * float(viol.sum())


def solve_ocp1_baseline(z_meas, params: ManipulatorParams, template: OcpSpec, v_init=None,
                        tol: float = 1e-6, max_rounds: int = 10, mu: float = 1e3) -> OcpSolution:
    """Successive linearization of the nonlinear OCP from a measured state.

    Each round linearizes along the nonlinear rollout of the current control
    iterate, solves the condensed QP for a step direction and backtracks on
    the penalized nonlinear cost. Stops once the full step is below ``tol``
    (max-norm) or after ``max_rounds``. The terminal weight is escalated
    (x10, ``template.max_rounds`` levels in total) whenever the iteration
    settles outside the terminal set. ``sqp_log`` holds the accepted step
    sizes.
    """
    N = template.horizon_steps
    z_meas = np.asarray(z_meas, dtype=float)
    v = np.zeros((N, NU)) if v_init is None else np.asarray(v_init, dtype=float).reshape(N, NU).copy()
    ts = template.tightened
    v = np.clip(v, ts.omega_lo, ts.omega_hi)
    esc = 0
    steps = []
    sol = None
    iters = 0
    z = rollout(z_meas, v, template.delta, params)
    for _ in range(max_rounds):
        scale = 10.0**esc
        scaled = replace(template, P=scale * np.asarray(template.P, dtype=float))
        model = ltv_along(z, v, params, template.delta)
        spec = replace(scaled, model=model, initial=z_meas, max_rounds=1)
        cq = build_condensed_qp(spec)
        res = solve_qp(cq.qp, tol=template.qp_tol)
        iters += res.iterations
        sol = (res, scale)
        d = res.x.reshape(N, NU) - v
        full = float(np.max(np.abs(d)))
        if full < tol:
            steps.append(full)
            v = v + d
            z = rollout(z_meas, v, template.delta, params)
            tn = _terminal_norm(template.P, z[N], template.z_ref[N])
            if tn <= template.epsilon or esc + 1 >= template.max_rounds:
                break
            esc += 1
            continue
        phi0 = _merit(z, v, scaled, mu)
        pred = cq.qp.objective(res.x) - cq.qp.objective(v.reshape(-1))
        alpha = 1.0
        accepted = False
        while alpha >= 1.0 / 64:
            v_try = v + alpha * d
            z_try = rollout(z_meas, v_try, template.delta, params)
            if _merit(z_try, v_try, scaled, mu) <= phi0 + 1e-4 * alpha * min(pred, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        v, z = v_try, z_try
        steps.append(alpha * full)
    res, scale = sol
    P = np.asarray(template.P, dtype=float)
    tn = _terminal_norm(P, z[N], template.z_ref[N])
    J = total_cost(z, v, template.z_ref, template.Q, template.R, P, template.delta)
    return OcpSolution(
        v_star=v, z_bar_star=z, J=J, kkt_residual=res.kkt_residual, iterations=iters,
        terminal_in_set=bool(tn <= template.epsilon), penalty_weight_used=scale, terminal_norm=tn,
        escalation=((scale, tn),), sqp_log=tuple(steps),
    )


def _solve_scaled(spec: OcpSpec, scale: float) -> OcpSolution:
    N = spec.horizon_steps
    cq = build_condensed_qp(spec, terminal_scale=scale)
    res = solve_qp(cq.qp, tol=spec.qp_tol)
    z = cq.free + cq.Su @ res.x
    P = np.asarray(spec.P, dtype=float)
    tn = _terminal_norm(P, z[N], spec.z_ref[N])
    v = res.x.reshape(N, NU)
    return OcpSolution(
        v_star=v, z_bar_star=z, J=total_cost(z, v, spec.z_ref, spec.Q, spec.R, P, spec.delta),
        kkt_residual=res.kkt_residual, iterations=res.iterations,
        terminal_in_set=bool(tn <= spec.epsilon), penalty_weight_used=scale, terminal_norm=tn,
        escalation=((scale, tn),),
    )
