import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tubempc.manipulator import (
    IntegrationError,
    ManipulatorParams,
    check_constraints,
    dynamics_nominal,
    forward_kinematics,
    initial_state,
    integrate_step,
    lipschitz_constants,
    paper_initial_theta,
    rollout,
    sample_disturbance,
    velocity_map,
)


def unit_params(lengths=(1.0, 1.0, 1.0), eta1=0.0):
    return ManipulatorParams(lengths=lengths, theta_lo=(0, 0, 0), theta_hi=(math.pi,) * 3,
                             omega_max=(1, 1, 1), eta1=eta1)


angles = st.floats(-10, 10, allow_nan=False)


class TestParams:
    def test_preset_values(self, params):
        assert params.lengths == (math.sqrt(5), math.sqrt(5), math.sqrt(10))
        assert params.theta_lo == (math.pi / 2, 0.0, 0.0)
        assert params.theta_hi == (math.pi, math.pi, math.pi / 2)
        assert params.omega_max == (math.pi / 16,) * 3

    @pytest.mark.parametrize("kw", [
        dict(lengths=(0, 1, 1)),
        dict(theta_lo=(1, 0, 0), theta_hi=(1, 1, 1)),
        dict(omega_max=(1, -1, 1)),
        dict(eta1=-0.1),
        dict(lengths=(1, 1)),
        dict(lengths=(1, float("nan"), 1)),
    ])
    def test_invalid(self, kw):
        base = dict(lengths=(1, 1, 1), theta_lo=(0, 0, 0), theta_hi=(1, 1, 1), omega_max=(1, 1, 1))
        base.update(kw)
        with pytest.raises(ValueError):
            ManipulatorParams(**base)


class TestVelocityMap:
    def test_vertical_links(self):
        T = velocity_map(np.full(3, math.pi / 2), unit_params())
        assert_allclose(T[0], [-1, -1, -1], atol=1e-15)
        assert_allclose(T[1], [0, 0, 0], atol=1e-15)
        assert_array_equal(T[2:], np.eye(3))

    def test_horizontal_links(self):
        T = velocity_map(np.zeros(3), unit_params((1.0, 2.0, 3.0)))
        assert_array_equal(T[0], [0, 0, 0])
        assert_array_equal(T[1], [1, 2, 3])
        assert_array_equal(T[2:], np.eye(3))

    def test_preset_angles(self, params):
        T = velocity_map(paper_initial_theta(), params)
        assert_allclose(T[:, 0], [-1, -2, 1, 0, 0], atol=1e-14)
        assert_allclose(T[:, 1], [-2, -1, 0, 1, 0], atol=1e-14)
        assert_allclose(T[:, 2], [-1, 3, 0, 0, 1], atol=1e-14)

    @given(st.tuples(angles, angles, angles))
    def test_column_norms(self, th):
        p = unit_params((0.5, 2.0, 3.0))
        T = velocity_map(np.array(th), p)
        assert_allclose(np.linalg.norm(T, axis=0), np.sqrt(np.array(p.lengths) ** 2 + 1), rtol=1e-12)


class TestDynamics:
    def test_zero_input(self, params, z0):
        assert_array_equal(dynamics_nominal(z0, np.zeros(3), params), np.zeros(5))

    def test_first_column(self):
        z = np.array([0, 0, math.pi / 2, math.pi / 2, math.pi / 2])
        assert_allclose(dynamics_nominal(z, [1, 0, 0], unit_params()), [-1, 0, 1, 0, 0], atol=1e-15)

    def test_preset_equal_rates(self, params, z0):
        w = 0.3
        zd = dynamics_nominal(z0, [w, w, w], params)
        assert_allclose(zd[:2], [-4 * w, 0.0], atol=1e-14)

    def test_state_lipschitz_l1(self, params):
        rng = np.random.default_rng(1)
        l1, _, _ = lipschitz_constants(params)
        lo, hi, w = np.array(params.theta_lo), np.array(params.theta_hi), np.array(params.omega_max)
        z1 = np.c_[rng.uniform(-5, 5, (10_000, 2)), rng.uniform(lo, hi, (10_000, 3))]
        z2 = np.c_[rng.uniform(-5, 5, (10_000, 2)), rng.uniform(lo, hi, (10_000, 3))]
        u = rng.uniform(-w, w, (10_000, 3))
        ratio = [np.linalg.norm(dynamics_nominal(a, c, params) - dynamics_nominal(b, c, params)) / np.linalg.norm(a - b)
                 for a, b, c in zip(z1, z2, u)]
        assert max(ratio) <= l1

    def test_input_lipschitz(self, params):
        # l2 = 1 bounds the angle rows only; the full field's input gain is
        # ||T(theta)||_2, at least max_i sqrt(L_i^2 + 1)
        rng = np.random.default_rng(2)
        _, l2, _ = lipschitz_constants(params)
        lo, hi = np.array(params.theta_lo), np.array(params.theta_hi)
        worst_rows, worst_full = 0.0, 0.0
        for _ in range(10_000):
            z = np.r_[0.0, 0.0, rng.uniform(lo, hi)]
            u1, u2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            d = dynamics_nominal(z, u1, params) - dynamics_nominal(z, u2, params)
            worst_rows = max(worst_rows, np.linalg.norm(d[2:]) / np.linalg.norm(u1 - u2))
            worst_full = max(worst_full, np.linalg.norm(d) / np.linalg.norm(u1 - u2))
        assert worst_rows <= l2 + 1e-12
        frobenius = math.sqrt(sum(L**2 for L in params.lengths) + 3)
        assert l2 < worst_full <= frobenius


class TestIntegration:
    def test_zero_input_is_fixed_point(self, params, z0):
        assert_array_equal(integrate_step(z0, np.zeros(3), 0.1, params), z0)

    def test_constant_field_disturbance(self, z0):
        p = ManipulatorParams.paper(eta1=1.0)
        c = 0.7
        out = integrate_step(z0, np.zeros(3), 0.1, p, e=[0, 0, c, 0, 0])
        assert out[2] == z0[2] + 0.1 * c

    def test_fine_step_oracle(self, params, z0):
        rng = np.random.default_rng(2)
        for _ in range(20):
            u = rng.uniform(-1, 1, 3) * np.array(params.omega_max)
            coarse = integrate_step(z0, u, 0.1, params)
            fine = z0
            for _ in range(100):
                fine = integrate_step(fine, u, 0.001, params)
            assert_allclose(coarse, fine, atol=1e-8, rtol=0)

    def test_disturbance_adds_delta_e(self, z0):
        p = ManipulatorParams.paper(eta1=0.05)
        e = sample_disturbance(np.random.default_rng(0), 0.05)
        u = np.array([0.1, -0.05, 0.02])
        diff = integrate_step(z0, u, 0.1, p, e=e) - integrate_step(z0, u, 0.1, p)
        assert_allclose(diff, 0.1 * e, atol=1e-15)

    def test_disturbance_above_bound_rejected(self, params, z0):
        with pytest.raises(ValueError, match="exceeds eta1"):
            integrate_step(z0, np.zeros(3), 0.1, params, e=[1, 0, 0, 0, 0])

    def test_bad_delta(self, params, z0):
        with pytest.raises(ValueError):
            integrate_step(z0, np.zeros(3), 0.0, params)

    def test_blowup_detected(self, params, z0):
        with pytest.raises(IntegrationError):
            integrate_step(z0, [np.inf, 0, 0], 0.1, params)

    def test_rollout_consistent_with_kinematics(self, params, z0):
        rng = np.random.default_rng(3)
        w = np.array(params.omega_max)
        traj = rollout(z0, rng.uniform(-w, w, size=(300, 3)), 0.1, params)
        for z in traj:
            assert_allclose(z[:2], forward_kinematics(z[2:], params), atol=1e-6)


class TestKinematics:
    def test_preset_initial_position(self, params):
        assert_allclose(forward_kinematics(paper_initial_theta(), params), [0, 4], atol=1e-12)

    def test_straight_arm(self):
        assert_allclose(forward_kinematics(np.zeros(3), unit_params((1.0, 2.0, 3.0))), [6, 0])

    def test_initial_state_layout(self, params):
        z = initial_state(paper_initial_theta(), params)
        assert_array_equal(z[2:], paper_initial_theta())

    def test_lipschitz(self, params):
        l1, l2, l = lipschitz_constants(params)
        assert (l1, l2, l) == (math.sqrt(10), 1.0, 1 + math.sqrt(10))


class TestDisturbance:
    def test_zero_bound(self):
        assert_array_equal(sample_disturbance(np.random.default_rng(0), 0.0), np.zeros(5))

    def test_norm_bound(self):
        e = sample_disturbance(np.random.default_rng(0), 0.01, size=100_000)
        assert e.shape == (100_000, 5)
        assert np.linalg.norm(e, axis=1).max() <= 0.01

    def test_determinism(self):
        a = sample_disturbance(np.random.default_rng(7), 0.02, size=50)
        b = sample_disturbance(np.random.default_rng(7), 0.02, size=50)
        assert_array_equal(a, b)

    def test_uniform_ball_mean_radius(self):
        e = sample_disturbance(np.random.default_rng(1), 1.0, size=1_000_000)
        assert abs(np.linalg.norm(e, axis=1).mean() / (5 / 6) - 1) < 0.02

    def test_negative_bound(self):
        with pytest.raises(ValueError):
            sample_disturbance(np.random.default_rng(0), -1.0)


class TestConstraints:
    def test_lower_joint_bound_is_feasible(self, params):
        z = np.array([0, 0, math.pi / 2, 1.0, 0.5])
        rep = check_constraints(z, np.zeros(3), params)
        assert rep.feasible
        assert rep.theta_margin[0] == 0.0

    def test_input_violation_margin(self, params):
        z = np.array([0, 0, 2.0, 1.0, 0.5])
        rep = check_constraints(z, [math.pi / 8, 0, 0], params)
        assert not rep.feasible
        assert not rep.omega_ok[0]
        assert rep.omega_margin[0] == pytest.approx(-math.pi / 16, abs=1e-15)

    def test_zero_theta2_boundary(self, params):
        rep = check_constraints(np.array([0, 0, 2.0, 0.0, 0.3]), np.zeros(3), params)
        assert rep.theta_ok[1] and rep.theta_margin[1] == 0.0
        assert rep.min_margin == 0.0

    def test_tolerance(self, params):
        z = np.array([0, 0, math.pi / 2 - 1e-12, 1.0, 0.5])
        assert not check_constraints(z, np.zeros(3), params).feasible
        assert check_constraints(z, np.zeros(3), params, tol=1e-9).feasible

    @settings(max_examples=50)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    def test_margin_sign_matches_flag(self, a, b, c):
        p = ManipulatorParams.paper()
        rep = check_constraints(np.array([0, 0, a, b, c]), np.array([a, b, c]) / 10, p)
        assert rep.feasible == (rep.min_margin >= 0)
