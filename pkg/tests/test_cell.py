import dataclasses

import numpy as np
import pytest

from lrcssm import cell
from lrcssm.cell import (a_diag, b_vec, drift, euler_step, gates,
                         step_jacobian_diag)
from lrcssm.errors import ConfigurationError, NumericError

from conftest import PARAM_FIELDS, make_params, zero_params


def scalar_gates_oracle(x, u, p):
    """Element-by-element reimplementation of the gate equations."""
    d, n = p.state_dim, p.input_dim
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    f = np.empty(d)
    z = np.empty(d)
    e = np.empty(d)
    for i in range(d):
        sx = sig(p.a_x[i] * x[i] + p.b_x[i])
        pre_u = sum(p.a_u[i, j] * u[j] for j in range(n)) + p.b_u_bias[i]
        su = sig(pre_u)
        f[i] = p.g_max_x[i] * sx + p.g_max_u[i] * su + p.g_leak[i]
        z[i] = p.k_max_x[i] * sx + p.k_max_u[i] * su + p.g_leak[i]
        e[i] = (p.w_x[i] * x[i] + p.v_x[i]
                + sum(p.w_u[i, j] * u[j] for j in range(n)) + p.v_u_bias[i])
    return f, z, e


class TestGates:
    def test_all_zero_params(self, rng):
        p = zero_params(4, 3)
        gv = gates(rng.standard_normal(4), rng.standard_normal(3), p)
        assert np.all(gv.f_star == 0)
        assert np.all(gv.z_star == 0)
        assert np.all(gv.eps_star == 0)

    def test_unit_gain_gives_half(self, rng):
        p = zero_params(4, 3)
        p.g_max_x[:] = 1.0
        gv = gates(rng.standard_normal(4), rng.standard_normal(3), p)
        assert np.allclose(gv.f_star, 0.5)

    def test_matches_scalar_oracle(self, rng):
        p = make_params(rng, 3, 2)
        x = rng.standard_normal(3)
        u = rng.standard_normal(2)
        gv = gates(x, u, p)
        f, z, e = scalar_gates_oracle(x, u, p)
        np.testing.assert_allclose(gv.f_star, f, rtol=1e-12)
        np.testing.assert_allclose(gv.z_star, z, rtol=1e-12)
        np.testing.assert_allclose(gv.eps_star, e, rtol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        p = make_params(rng, 3, 2)
        with pytest.raises(ConfigurationError):
            gates(np.zeros(4), np.zeros(2), p)
        with pytest.raises(ConfigurationError):
            gates(np.zeros(3), np.zeros(5), p)


class TestDrift:
    def test_zero_params_decay(self):
        p = zero_params(5, 2)
        x = np.full(5, 2.0)
        np.testing.assert_allclose(drift(x, np.zeros(2), p), -0.5)

    def test_zero_state_zero_drift(self):
        p = zero_params(5, 2)
        assert np.all(drift(np.zeros(5), np.zeros(2), p) == 0)

    def test_two_path_equality(self, rng):
        for _ in range(50):
            p = make_params(rng, 6, 3)
            x = rng.standard_normal(6)
            u = rng.standard_normal(3)
            lhs = drift(x, u, p)
            rhs = a_diag(x, u, p) * x + b_vec(x, u, p)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-15)


class TestADiagBVec:
    def test_zero_params(self):
        p = zero_params(4, 2)
        x = np.zeros(4)
        u = np.zeros(2)
        np.testing.assert_allclose(a_diag(x, u, p), -0.25)
        assert np.all(b_vec(x, u, p) == 0)

    def test_zero_leak_potential_kills_offset(self, rng):
        p = make_params(rng, 4, 2)
        p.e_leak[:] = 0.0
        assert np.all(b_vec(rng.standard_normal(4), rng.standard_normal(2), p) == 0)

    def test_matches_gate_oracle(self, rng):
        p = make_params(rng, 4, 3)
        x = rng.standard_normal(4)
        u = rng.standard_normal(3)
        f, z, e = scalar_gates_oracle(x, u, p)
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        np.testing.assert_allclose(a_diag(x, u, p), -sig(f) * sig(e), rtol=1e-12)
        np.testing.assert_allclose(
            b_vec(x, u, p), np.tanh(z) * sig(e) * p.e_leak, rtol=1e-12, atol=1e-15)

    def test_bounds(self, rng):
        # sig terms live in (0, 1), so a_diag in (-1, 0) and 1 + a_diag in (0, 1)
        for _ in range(25):
            p = make_params(rng, 8, 3)
            x = 3.0 * rng.standard_normal(8)
            u = 3.0 * rng.standard_normal(3)
            a = a_diag(x, u, p)
            assert np.all(a > -1.0) and np.all(a < 0.0)
            assert np.all(1.0 + a > 0.0) and np.all(1.0 + a < 1.0)

    def test_gate_squash_ranges(self, rng):
        from lrcssm.cell import evaluate
        for _ in range(25):
            p = make_params(rng, 8, 3)
            ev = evaluate(5 * rng.standard_normal(8), 5 * rng.standard_normal(3), p)
            for arr in (ev.sig_f, ev.sig_eps_a, ev.sig_eps_b, ev.sx_a, ev.su):
                assert np.all((arr > 0.0) & (arr < 1.0))
            assert np.all((ev.tanh_z > -1.0) & (ev.tanh_z < 1.0))


class TestEulerStep:
    def test_zero_params_dt_one(self):
        p = zero_params(3, 2)
        out = euler_step(np.full(3, 2.0), np.zeros(2), p, 1.0)
        np.testing.assert_allclose(out, 1.5)

    def test_dt_zero_identity(self, rng):
        p = make_params(rng, 3, 2)
        x = rng.standard_normal(3)
        np.testing.assert_array_equal(euler_step(x, rng.standard_normal(2), p, 0.0), x)

    def test_equals_x_plus_dt_drift(self, rng):
        p = make_params(rng, 5, 2)
        x = rng.standard_normal(5)
        u = rng.standard_normal(2)
        dt = 0.37
        np.testing.assert_allclose(
            euler_step(x, u, p, dt), x + dt * drift(x, u, p), rtol=1e-15)

    def test_overflow_raises_with_index(self):
        p = zero_params(3, 2)
        x = np.array([1.0, np.inf, 1.0])
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericError) as exc:
                euler_step(x, np.zeros(2), p, 1.0)
        assert exc.value.where == 1


class TestStepJacobian:
    def test_zero_params(self):
        p = zero_params(4, 2)
        lam = step_jacobian_diag(np.zeros(4), np.zeros(2), p, 1.0)
        np.testing.assert_allclose(lam, 0.75)

    def test_no_state_gate_dependence(self, rng):
        # with a_x = w_x = 0, only the explicit x term differentiates
        p = make_params(rng, 4, 2)
        p.a_x[:] = 0.0
        p.w_x[:] = 0.0
        x = rng.standard_normal(4)
        u = rng.standard_normal(2)
        lam = step_jacobian_diag(x, u, p, 1.0)
        np.testing.assert_allclose(lam, 1.0 + a_diag(x, u, p), rtol=1e-12)

    @pytest.mark.parametrize("mode", cell.DEPENDENCE_MODES)
    @pytest.mark.parametrize("rho", [None, 0.9])
    def test_matches_finite_differences(self, rng, mode, rho):
        h = 1e-6
        for _ in range(100):
            d = int(rng.integers(1, 7))
            n = int(rng.integers(1, 5))
            p = make_params(rng, d, n)
            x = rng.standard_normal(d)
            u = rng.standard_normal(n)
            lam = step_jacobian_diag(x, u, p, 1.0, mode=mode, rho=rho)
            fd = np.empty(d)
            for i in range(d):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd[i] = (euler_step(xp, u, p, 1.0, mode=mode, rho=rho)[i]
                         - euler_step(xm, u, p, 1.0, mode=mode, rho=rho)[i]) / (2 * h)
            rel = np.abs(lam - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() <= 1e-6


class TestDiagonality:
    def test_cross_coordinate_sensitivity_is_zero(self, rng):
        # perturbing x_j must not move output coordinate i != j at all
        for _ in range(100):
            d = int(rng.integers(2, 8))
            p = make_params(rng, d, 3)
            x = rng.standard_normal(d)
            u = rng.standard_normal(3)
            base = euler_step(x, u, p, 1.0)
            j = int(rng.integers(0, d))
            xp = x.copy()
            xp[j] += rng.standard_normal()
            moved = euler_step(xp, u, p, 1.0)
            off = np.delete(np.abs(moved - base), j)
            assert off.max() <= 1e-12


class TestBroadcasting:
    def test_leading_axes_match_loop(self, rng):
        # BLAS picks different kernels for batched matmuls, so agreement is
        # to round-off rather than bitwise.
        p = make_params(rng, 4, 3)
        xs = rng.standard_normal((7, 5, 4))
        us = rng.standard_normal((7, 5, 3))
        batched = euler_step(xs, us, p, 1.0)
        for i in range(7):
            for j in range(5):
                np.testing.assert_allclose(
                    batched[i, j], euler_step(xs[i, j], us[i, j], p, 1.0),
                    rtol=1e-13, atol=1e-15)


class TestValidate:
    def test_bad_shape_reported(self, rng):
        p = make_params(rng, 4, 3)
        p = dataclasses.replace(p, w_u=np.zeros((3, 3)))
        with pytest.raises(ConfigurationError, match="w_u"):
            p.validate()

    def test_non_finite_reported(self, rng):
        p = make_params(rng, 4, 3)
        p.e_leak[0] = np.nan
        with pytest.raises(ConfigurationError, match="e_leak"):
            p.validate()

    def test_all_fields_present(self, rng):
        p = make_params(rng, 4, 3)
        assert tuple(f.name for f in dataclasses.fields(p)) == PARAM_FIELDS
        p.validate()
