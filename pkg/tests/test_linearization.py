from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tubempc.linearization import (
    LinearModel,
    certified_budget,
    discretize_zoh,
    disturbance_budget,
    excursion_bounds,
    hessian_bound,
    linearize,
    linearize_along,
    linearize_discrete,
    sample_linearization_error,
    zoh,
)
from tubempc.manipulator import dynamics_nominal, lipschitz_constants, velocity_map


def hessian_tensor(z, u, params):
    """Second partials of f w.r.t. (theta, omega), shape (5, 6, 6)."""
    L = params.L
    th = np.asarray(z)[2:]
    H = np.zeros((5, 6, 6))
    for i in range(3):
        H[0, i, i] = L[i] * u[i] * np.sin(th[i])
        H[0, i, 3 + i] = H[0, 3 + i, i] = -L[i] * np.cos(th[i])
        H[1, i, i] = -L[i] * u[i] * np.cos(th[i])
        H[1, i, 3 + i] = H[1, 3 + i, i] = -L[i] * np.sin(th[i])
    return H


def test_hessian_tensor_matches_finite_differences(params, z0):
    u = np.array([0.1, -0.15, 0.05])
    h = 1e-4

    def grad(w):
        zz = np.r_[z0[:2], w[:3]]
        m = linearize(zz, w[3:], params)
        return np.hstack([m.A[:, 2:], m.B])

    w0 = np.r_[z0[2:], u]
    fd = np.empty((5, 6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd[:, :, j] = (grad(w0 + e) - grad(w0 - e)) / (2 * h)
    assert_allclose(fd, hessian_tensor(z0, u, params), atol=1e-7)


class TestLinearize:
    def test_zero_input(self, params, z0):
        m = linearize(z0, np.zeros(3), params)
        assert_array_equal(m.A, np.zeros((5, 5)))
        assert_allclose(m.Omega, np.zeros(5), atol=1e-15)
        assert_allclose(m.B, velocity_map(z0[2:], params))

    def test_structure(self, params, z0):
        m = linearize(z0, [0.1, 0.2, -0.1], params)
        assert_array_equal(m.A[2:], np.zeros((3, 5)))
        assert_array_equal(m.A[:, :2], np.zeros((5, 2)))
        assert_array_equal(m.B[2:], np.eye(3))

    def test_omega_invariant(self, params, z0):
        u0 = np.array([0.1, 0.2, -0.1])
        m = linearize(z0, u0, params)
        assert_allclose(m.A @ z0 + m.B @ u0 + m.Omega, dynamics_nominal(z0, u0, params), atol=1e-14)

    def test_deterministic(self, params, z0):
        a = linearize_discrete(z0, [0.1, 0.0, 0.1], params, 0.1)
        b = linearize_discrete(z0, [0.1, 0.0, 0.1], params, 0.1)
        for f in ("A", "B", "Omega", "Ad", "Bd", "Omegad"):
            assert_array_equal(getattr(a, f), getattr(b, f))

    def test_along_matches_pointwise(self, params):
        rng = np.random.default_rng(0)
        zs = np.c_[rng.normal(size=(7, 2)), rng.uniform(0, 3, (7, 3))]
        us = rng.uniform(-0.2, 0.2, (7, 3))
        A, B = linearize_along(zs, us, params)
        for i in range(7):
            m = linearize(zs[i], us[i], params)
            assert_allclose(A[i], m.A, atol=1e-15)
            assert_allclose(B[i], m.B, atol=1e-15)


class TestHessianBound:
    def test_exact_at_point(self, params, z0):
        for u0 in (np.zeros(3), np.array([0.1, -0.15, 0.05])):
            exact = np.linalg.norm(hessian_tensor(z0, u0, params))
            assert hessian_bound(z0, u0, params, 0.0, 0.0) == pytest.approx(exact, rel=1e-12)

    def test_monotone_in_input_radius(self, params, z0):
        vals = [hessian_bound(z0, [0.1, 0, 0], params, 0.1, r) for r in np.linspace(0, 2, 21)]
        assert np.all(np.diff(vals) >= 0)

    def test_sampling_oracle(self, params, z0):
        rng = np.random.default_rng(1)
        u0 = np.array([0.05, -0.1, 0.15])
        rz, ru = 0.3, 0.4
        bound = hessian_bound(z0, u0, params, rz, ru)
        worst = 0.0
        for _ in range(10_000):
            dz = rng.uniform(-rz, rz, 5)
            du = rng.uniform(-ru, ru, 3)
            worst = max(worst, np.linalg.norm(hessian_tensor(z0 + dz, u0 + du, params)))
        assert worst <= bound

    def test_negative_radius(self, params, z0):
        with pytest.raises(ValueError):
            hessian_bound(z0, np.zeros(3), params, -1.0, 0.0)


class TestBudget:
    def test_trivial(self, params, z0):
        m = linearize(z0, np.zeros(3), params)
        b = disturbance_budget(replace_omega(m, np.zeros(5)), 3.0, 0.0, 0.0, 0.01, 1.0, 1.0)
        assert b.eta2 == 0.0 and b.eta == 0.01

    def test_linear_in_dz(self, params, z0):
        m = linearize(z0, [0.1, 0.1, 0.1], params)
        base = disturbance_budget(m, 2.0, 0.0, 0.5, 0.0, 3.0, 1.0).eta2
        one = disturbance_budget(m, 2.0, 0.1, 0.5, 0.0, 3.0, 1.0).eta2
        two = disturbance_budget(m, 2.0, 0.2, 0.5, 0.0, 3.0, 1.0).eta2
        assert two - base == pytest.approx(2 * (one - base), rel=1e-12)

    def test_eta_is_sum(self, params, z0):
        _, b, _, _ = certified_budget(z0, [0.1, 0.0, -0.1], params, 0.1)
        assert b.eta == b.eta1 + b.eta2
        assert min(b.eta1, b.etaR, b.eta2) >= 0

    def test_capped(self, params, z0):
        _, b, _, _ = certified_budget(z0, [0.1, 0.0, -0.1], params, 0.1)
        c = b.capped(0.02)
        assert c.eta == pytest.approx(0.02) and c.eta1 == 0.01

    def test_soundness_samples(self, params, z0):
        rng = np.random.default_rng(2)
        m, b, dz, du = certified_budget(z0, [0.1, 0.0, -0.1], params, 0.1)
        err = sample_linearization_error(m, params, dz, du, 10_000, rng)
        assert err.max() <= b.eta2

    def test_excursions(self, params):
        dz, du = excursion_bounds(params, 0.1)
        w = np.pi / 16
        assert du == pytest.approx(2 * np.sqrt(3) * w)
        assert dz == pytest.approx(0.1 * np.sqrt((sum(params.lengths) * w) ** 2 + 3 * w**2))

    def test_negative_inputs(self, params, z0):
        with pytest.raises(ValueError):
            disturbance_budget(linearize(z0, np.zeros(3), params), -1, 0, 0, 0, 1, 1)

    def test_lipschitz_arguments(self, params):
        l1, l2, _ = lipschitz_constants(params)
        assert l1 > 0 and l2 == 1.0


def replace_omega(m: LinearModel, omega) -> LinearModel:
    return replace(m, Omega=np.asarray(omega, dtype=float))


def euler_richardson(A, B, c, u, delta, n):
    """Euler with n and 2n micro-steps, extrapolated to second order."""

    def run(k):
        h = delta / k
        # propagate the state matrix and the forced response together
        Phi = np.eye(A.shape[0])
        x = np.zeros(A.shape[0])
        step = np.eye(A.shape[0]) + h * A
        f = h * (B @ u + c)
        for _ in range(k):
            Phi = step @ Phi
            x = step @ x + f
        return Phi, x

    P1, x1 = run(n)
    P2, x2 = run(2 * n)
    return 2 * P2 - P1, 2 * x2 - x1


class TestZOH:
    def test_zero_A(self):
        B = np.arange(15.0).reshape(5, 3)
        c = np.arange(5.0)
        Ad, Bd, cd = zoh(np.zeros((5, 5)), B, c, 0.1)
        assert_array_equal(Ad, np.eye(5))
        assert_allclose(Bd, 0.1 * B, rtol=1e-15)
        assert_allclose(cd, 0.1 * c, rtol=1e-15)

    def test_small_delta_limit(self, params, z0):
        m = linearize(z0, [0.1, 0.2, 0.3], params)
        Ad, Bd, _ = zoh(m.A, m.B, m.Omega, 1e-9)
        assert_allclose(Ad, np.eye(5), atol=1e-8)
        assert np.abs(Bd).max() < 1e-8

    def test_matches_scipy_expm(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            A = rng.normal(size=(5, 5))
            B = rng.normal(size=(5, 3))
            c = rng.normal(size=5)
            M = np.zeros((9, 9))
            M[:5, :5], M[:5, 5:8], M[:5, 8] = A, B, c
            E = scipy.linalg.expm(0.3 * M)
            Ad, Bd, cd = zoh(A, B, c, 0.3)
            assert_allclose(Ad, E[:5, :5], atol=1e-12)
            assert_allclose(Bd, E[:5, 5:8], atol=1e-12)
            assert_allclose(cd, E[:5, 8], atol=1e-12)

    def test_fine_step_oracle(self, params, z0):
        rng = np.random.default_rng(4)
        for _ in range(3):
            u0 = rng.uniform(-0.2, 0.2, 3)
            m = discretize_zoh(linearize(z0 + np.r_[0, 0, rng.uniform(-0.2, 0.2, 3)], u0, params), 0.1)
            u = rng.uniform(-0.2, 0.2, 3)
            Phi, x = euler_richardson(m.A, m.B, m.Omega, u, 0.1, 10_000)
            assert_allclose(m.Ad, Phi, atol=1e-8)
            assert_allclose(m.Bd @ u + m.Omegad, x, atol=1e-8)

    def test_batched_equals_single(self, params):
        rng = np.random.default_rng(5)
        zs = np.c_[np.zeros((4, 2)), rng.uniform(0, 3, (4, 3))]
        us = rng.uniform(-0.2, 0.2, (4, 3))
        A, B = linearize_along(zs, us, params)
        c = rng.normal(size=(4, 5))
        Ad, Bd, cd = zoh(A, B, c, 0.1)
        for i in range(4):
            a, b, d = zoh(A[i], B[i], c[i], 0.1)
            assert_allclose(Ad[i], a, atol=1e-15)
            assert_allclose(Bd[i], b, atol=1e-15)
            assert_allclose(cd[i], d, atol=1e-15)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            zoh(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros(2), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 1.0), st.floats(-2, 2))
    def test_semigroup(self, delta, a):
        A = np.array([[a, 1.0], [0.0, -0.5]])
        Ad1, _, _ = zoh(A, np.zeros((2, 1)), np.zeros(2), delta)
        Ad2, _, _ = zoh(A, np.zeros((2, 1)), np.zeros(2), 2 * delta)
        assert_allclose(Ad1 @ Ad1, Ad2, rtol=1e-11, atol=1e-12)
