import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from tubempc.gains import synthesize_tube_gains, tighten_constraints
from tubempc.linearization import LinearModel, linearize_discrete
from tubempc.manipulator import ManipulatorParams, integrate_step, rollout
from tubempc.ocp import (
    InfeasibleTighteningError,
    OcpSpec,
    build_condensed_qp,
    ltv_along,
    rk4_step_jacobians,
    solve_ocp,
    solve_ocp1_baseline,
    total_cost,
)
from tubempc.prediction import DisturbedStateSet

Q = 0.1 * np.eye(5)
R = 0.01 * np.eye(3)


def preset_spec(params, z0, N=30, target=(0.5, 4.2), u0=None, **kw):
    # terminal weight from the stabilizable half-speed linearization
    half = 0.5 * np.array(params.omega_max)
    lin = linearize_discrete(z0, half, params, 0.1)
    g = synthesize_tube_gains(lin.Ad, lin.Bd, Q, R)
    model = lin if u0 is None else linearize_discrete(z0, u0, params, 0.1)
    tight = tighten_constraints(params, None, N, 0.0, 0.0, cap=0.0, input_radius=0.0)
    z_ref = z0.copy()
    z_ref[:2] = target
    return OcpSpec(horizon_steps=N, delta=0.1, model=model, Q=Q, R=R, P=g.P, tightened=tight,
                   initial=z0, z_ref=z_ref, **kw)


class TestTotalCost:
    def test_scalar_example(self):
        # 1 * (1*1 + 1*1) + 3 * 1 = 5
        assert total_cost([[1.0], [1.0]], [[1.0]], [[0.0], [0.0]], 1.0, 1.0, 3.0) == 5.0

    def test_zero_at_reference(self):
        z = np.ones((4, 5))
        assert total_cost(z, np.zeros((3, 3)), z, Q, R, np.eye(5), 0.1) == 0.0

    def test_delta_scales_stage_only(self):
        z = np.array([[1.0], [2.0], [3.0]])
        v = np.array([[0.5], [0.5]])
        a = total_cost(z, v, np.zeros((3, 1)), 1.0, 1.0, 0.0, 1.0)
        b = total_cost(z, v, np.zeros((3, 1)), 1.0, 1.0, 0.0, 0.1)
        assert b == pytest.approx(0.1 * a)


def _scalar_embedding(a, b, q, r, p, z0, d):
    """Only coordinate 0 is driven, by input 0; everything else is frozen."""
    params = ManipulatorParams(lengths=(1, 1, 1), theta_lo=(-10,) * 3, theta_hi=(10,) * 3, omega_max=(100,) * 3)
    Ad = np.diag([a, 1, 1, 1, 1.0])
    Bd = np.zeros((5, 3))
    Bd[0, 0] = b
    model = LinearModel(A=np.zeros((5, 5)), B=np.zeros((5, 3)), Omega=np.zeros(5), z0=np.zeros(5),
                        u0=np.zeros(3), Ad=Ad, Bd=Bd, Omegad=np.zeros(5), delta=d)
    tight = tighten_constraints(params, None, 1, 0.0, 0.0, cap=0.0, input_radius=0.0)
    return OcpSpec(horizon_steps=1, delta=d, model=model, Q=np.diag([q, 0, 0, 0, 0]),
                   R=np.diag([r, 1, 1]), P=np.diag([p, 0, 0, 0, 0]), tightened=tight,
                   initial=np.r_[z0, 0, 0, 0, 0], z_ref=np.zeros(5))


class TestSolveOcp:
    def test_scalar_closed_form(self):
        a, b, q, r, z0 = 0.9, 0.4, 2.0, 0.3, 1.5
        sol = solve_ocp(_scalar_embedding(a, b, q, r, q, z0, 1.0))
        assert sol.v_star[0, 0] == pytest.approx(-q * a * b * z0 / (q * b**2 + r), abs=1e-10)
        assert_allclose(sol.v_star[0, 1:], 0, atol=1e-12)

    def test_scalar_with_delta(self):
        a, b, q, r, p, z0, d = 1.1, -0.7, 1.0, 0.5, 4.0, -2.0, 0.1
        sol = solve_ocp(_scalar_embedding(a, b, q, r, p, z0, d))
        assert sol.v_star[0, 0] == pytest.approx(-p * a * b * z0 / (p * b**2 + d * r), abs=1e-10)

    def test_hessian_shape_and_conditioning(self, params, z0):
        cq = build_condensed_qp(preset_spec(params, z0))
        H = cq.qp.H
        assert H.shape == (90, 90)
        assert np.linalg.eigvalsh(H).min() >= 2 * 0.1 * 0.01 * (1 - 1e-9)

    def test_at_reference_zero_input(self, params, z0):
        spec = preset_spec(params, z0, target=z0[:2], u0=np.zeros(3))
        sol = solve_ocp(spec)
        assert_allclose(sol.v_star, 0, atol=1e-12)
        assert sol.J == pytest.approx(0.0, abs=1e-20)

    def test_replay_identity(self, params, z0):
        spec = preset_spec(params, z0)
        sol = solve_ocp(spec)
        m = spec.model
        z = z0.copy()
        for i in range(30):
            assert_allclose(sol.z_bar_star[i], z, atol=1e-12)
            z = m.Ad @ z + m.Bd @ sol.v_star[i] + m.Omegad
        assert_allclose(sol.z_bar_star[30], z, atol=1e-12)

    def test_cost_consistency(self, params, z0):
        spec = preset_spec(params, z0)
        cq = build_condensed_qp(spec)
        sol = solve_ocp(spec)
        eN = sol.z_bar_star[-1] - spec.z_ref[-1]
        # with one round the QP objective plus constants is the cost
        if sol.penalty_weight_used == 1.0:
            qp_val = cq.qp.objective(sol.v_star.reshape(-1)) + cq.const_stage
            qp_val += (cq.free[-1] - spec.z_ref[-1]) @ spec.P @ (cq.free[-1] - spec.z_ref[-1])
            assert qp_val == pytest.approx(sol.J, rel=1e-9)
        assert sol.J == pytest.approx(total_cost(sol.z_bar_star, sol.v_star, spec.z_ref, Q, R, spec.P, 0.1))
        assert sol.terminal_norm == pytest.approx(math.sqrt(eN @ spec.P @ eN))

    def test_constraints_respected(self, params, z0):
        spec = preset_spec(params, z0, target=(-3.0, 5.0))
        sol = solve_ocp(spec)
        ts = spec.tightened
        assert np.all(np.abs(sol.v_star) <= ts.omega_hi + 1e-9)
        assert np.all(sol.z_bar_star[1:, 2:] >= ts.theta_lo[1:] - 1e-9)
        assert np.all(sol.z_bar_star[1:, 2:] <= ts.theta_hi[1:] + 1e-9)

    def test_escalation_exhausted(self, params, z0):
        sol = solve_ocp(preset_spec(params, z0, target=(-3.0, 5.0), epsilon=0.0))
        assert len(sol.escalation) == 8
        assert [s for s, _ in sol.escalation] == [10.0**k for k in range(8)]
        assert not sol.terminal_in_set
        assert sol.terminal_norm == min(t for _, t in sol.escalation)

    def test_escalation_stops_when_inside(self, params, z0):
        sol = solve_ocp(preset_spec(params, z0, epsilon=np.inf))
        assert len(sol.escalation) == 1 and sol.terminal_in_set

    def test_deterministic(self, params, z0):
        a = solve_ocp(preset_spec(params, z0))
        b = solve_ocp(preset_spec(params, z0))
        assert np.array_equal(a.v_star, b.v_star) and a.J == b.J

    def test_state_set_initial_uses_center(self, params, z0):
        a = solve_ocp(preset_spec(params, z0))
        b = solve_ocp(replace(preset_spec(params, z0), initial=DisturbedStateSet(center=z0, radius=0.3, steps_ahead=4)))
        assert np.array_equal(a.v_star, b.v_star)

    def test_infeasible_tightening(self, params, z0):
        spec = preset_spec(params, z0)
        t = tighten_constraints(params, None, 30, 1.0, 0.0, cap=1.0)
        with pytest.raises(InfeasibleTighteningError, match="step 1"):
            solve_ocp(replace(spec, tightened=t))

    @pytest.mark.parametrize("kw", [dict(horizon_steps=0), dict(delta=0.0), dict(z_ref=np.zeros((3, 5))),
                                    dict(R=np.zeros((3, 3))), dict(max_rounds=0)])
    def test_invalid_spec(self, params, z0, kw):
        spec = preset_spec(params, z0)
        with pytest.raises(ValueError):
            replace(spec, **kw)


class TestOcp1:
    def test_ltv_exact_on_trajectory(self, params, z0):
        v = np.tile(0.5 * np.array(params.omega_max), (10, 1))
        z = rollout(z0, v, 0.1, params)
        Ad, Bd, c = ltv_along(z, v, params, 0.1)
        pred = np.einsum("iab,ib->ia", Ad, z[:-1]) + np.einsum("iab,ib->ia", Bd, v) + c
        assert_allclose(pred, z[1:], atol=1e-13)

    def test_step_jacobians_match_finite_differences(self, params, z0):
        rng = np.random.default_rng(0)
        z = z0 + np.r_[0, 0, rng.uniform(-0.3, 0.3, 3)]
        u = rng.uniform(-0.2, 0.2, 3)
        Phi, Gam = rk4_step_jacobians(z[None], u[None], params, 0.1)
        h = 1e-6
        fz = np.array([integrate_step(z + h * e, u, 0.1, params) - integrate_step(z - h * e, u, 0.1, params)
                       for e in np.eye(5)]).T / (2 * h)
        fu = np.array([integrate_step(z, u + h * e, 0.1, params) - integrate_step(z, u - h * e, 0.1, params)
                       for e in np.eye(3)]).T / (2 * h)
        assert_allclose(Phi[0], fz, atol=1e-8)
        assert_allclose(Gam[0], fu, atol=1e-8)

    def test_reaches_nonlinear_optimum(self, params, z0):
        spec = preset_spec(params, z0, epsilon=np.inf)
        sol = solve_ocp1_baseline(z0, params, spec, max_rounds=300, tol=1e-9)
        # the last accepted step is tiny (the merit is flat to rounding near the optimum)
        assert sol.sqp_log[-1] < 1e-5
        assert_allclose(sol.z_bar_star, rollout(z0, sol.v_star, 0.1, params), atol=1e-14)

        def cost(v):
            v = v.reshape(30, 3)
            return total_cost(rollout(z0, v, 0.1, params), v, spec.z_ref, Q, R, spec.P, 0.1)

        w = params.omega_max[0]
        ref = minimize(cost, np.zeros(90), method="L-BFGS-B", bounds=[(-w, w)] * 90,
                       options=dict(ftol=1e-15, gtol=1e-12, maxiter=20_000, maxfun=10**6))
        # joint bounds stay inactive here, so the box-only oracle is the same problem
        assert sol.J <= ref.fun + 1e-9
        assert sol.J == pytest.approx(ref.fun, rel=1e-8)

    def test_frozen_model_agreement_is_second_order(self, params, z0):
        # near the linearization point the nonlinear and frozen solutions differ by O(s^2)
        gaps = []
        for s in (0.004, 0.002, 0.001):
            spec = preset_spec(params, z0, target=z0[:2] + s * np.array([1.5, 1.0]), u0=np.zeros(3),
                              epsilon=np.inf)
            frozen = solve_ocp(spec)
            sol = solve_ocp1_baseline(z0, params, spec, max_rounds=300, tol=1e-12)
            gaps.append(np.abs(sol.v_star - frozen.v_star).max())
        assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.1)
        assert gaps[1] / gaps[2] == pytest.approx(4.0, rel=0.1)

    def test_at_reference_zero_controls(self, params, z0):
        spec = preset_spec(params, z0, target=z0[:2], epsilon=np.inf)
        sol = solve_ocp1_baseline(z0, params, spec)
        assert_allclose(sol.v_star, 0, atol=1e-10)
        assert sol.J == pytest.approx(0.0, abs=1e-18)

    def test_respects_input_bounds(self, params, z0):
        spec = preset_spec(params, z0, target=(-3.0, 5.0), epsilon=np.inf)
        sol = solve_ocp1_baseline(z0, params, spec)
        assert np.all(np.abs(sol.v_star) <= np.array(params.omega_max) + 1e-9)
