import numpy as np
import pytest

from lrcssm.backward import (GradientSet, adjoint_reverse_scan,
                             model_backward, step_backward)
from lrcssm.bench import flop_estimate, measured_flops
from lrcssm.errors import UsageError
from lrcssm.model import ModelConfig, forward, init_params, iter_named_arrays
from lrcssm.solver import SolverConfig
from lrcssm.train import cross_entropy
from lrcssm.verify import model_gradient_fd_error

from conftest import make_params, zero_params

TIGHT = SolverConfig(tol=1e-12, max_iters=80)


class TestStepBackward:
    def test_zero_params_diagonal_vjp(self, rng):
        p = zero_params(4, 2)
        ups = rng.standard_normal(4)
        d_x, d_u, grads = step_backward(np.zeros(4), np.zeros(2), p, 1.0, ups)
        np.testing.assert_allclose(d_x, 0.75 * ups, rtol=1e-14)

    def test_zero_upstream_all_zero(self, rng):
        p = make_params(rng, 4, 2)
        d_x, d_u, grads = step_backward(rng.standard_normal(4),
                                        rng.standard_normal(2), p, 1.0,
                                        np.zeros(4))
        assert np.all(d_x == 0) and np.all(d_u == 0)
        for _, arr in iter_named_arrays(grads):
            assert np.all(arr == 0)

    def test_matches_finite_differences(self, rng):
        import dataclasses
        from lrcssm.cell import euler_step
        h = 1e-6
        for _ in range(10):
            d, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            p = make_params(rng, d, n)
            x = rng.standard_normal(d)
            u = rng.standard_normal(n)
            ups = rng.standard_normal(d)
            d_x, d_u, grads = step_backward(x, u, p, 1.0, ups)
            for f in dataclasses.fields(p):
                arr = getattr(p, f.name)
                got = getattr(grads, f.name)
                for idx in np.ndindex(arr.shape):
                    orig = arr[idx]
                    arr[idx] = orig + h
                    up_val = float(ups @ euler_step(x, u, p, 1.0))
                    arr[idx] = orig - h
                    dn_val = float(ups @ euler_step(x, u, p, 1.0))
                    arr[idx] = orig
                    fd = (up_val - dn_val) / (2 * h)
                    assert abs(got[idx] - fd) <= 1e-6 * max(1.0, abs(fd))


class TestAdjointReverseScan:
    def test_unit_multipliers(self, rng):
        lam = np.ones((7, 3))
        seed = rng.standard_normal(3)
        adj = adjoint_reverse_scan(lam, seed)
        for row in adj:
            np.testing.assert_array_equal(row, seed)

    def test_constant_rho_geometric(self):
        t_len, rho = 9, 0.8
        lam = np.full((t_len, 2), rho)
        seed = np.array([1.0, -2.0])
        adj = adjoint_reverse_scan(lam, seed)
        for t in range(t_len):
            expect = rho ** (t_len - 1 - t) * np.linalg.norm(seed)
            assert abs(np.linalg.norm(adj[t]) - expect) <= 1e-10

    def test_matches_sequential_reverse_loop(self, rng):
        t_len = 256
        lam = rng.uniform(-1, 1, (t_len, 5))
        seed = rng.standard_normal(5)
        adj = adjoint_reverse_scan(lam, seed)
        want = np.empty((t_len, 5))
        want[-1] = seed
        for t in range(t_len - 2, -1, -1):
            want[t] = lam[t + 1] * want[t + 1]
        assert np.abs(adj - want).max() <= 1e-12

    def test_stability_bound(self, rng):
        # ||adjoint(tau)|| <= rho_hat^(steps back) * ||seed||
        lam = rng.uniform(-0.99, 0.99, (128, 4))
        seed = rng.standard_normal(4)
        adj = adjoint_reverse_scan(lam, seed)
        rho_hat = np.abs(lam).max()
        norms = np.linalg.norm(adj, axis=1)
        for t in range(128):
            bound = rho_hat ** (127 - t) * np.linalg.norm(seed)
            assert norms[t] <= bound * (1 + 1e-10) + 1e-300


def tiny_model(seed=0, mode="full", rho=None, blocks=2):
    cfg = ModelConfig(input_dim=2, hidden_dim=4, state_dim=3, num_blocks=blocks,
                      num_classes=3, seed=seed, dependence_mode=mode,
                      rho_clamp=rho, solver=TIGHT)
    return cfg, init_params(cfg)


class TestModelBackward:
    def test_zero_cotangent_zero_grads(self, rng):
        cfg, params = tiny_model()
        x = rng.standard_normal((2, 6, 2))
        _, cache = forward(params, x, cfg)
        gs = model_backward(cache, np.zeros((2, 3)))
        for _, arr in iter_named_arrays(gs.params):
            assert np.all(arr == 0)
        for g in gs.grad_x0:
            assert np.all(g == 0)

    def test_deterministic(self, rng):
        cfg, params = tiny_model()
        x = rng.standard_normal((2, 6, 2))
        y = rng.integers(0, 3, 2)
        logits, cache = forward(params, x, cfg)
        _, d_logits = cross_entropy(logits, y)
        a = model_backward(cache, d_logits)
        b = model_backward(cache, d_logits)
        for (_, va), (_, vb) in zip(iter_named_arrays(a.params),
                                    iter_named_arrays(b.params)):
            np.testing.assert_array_equal(va, vb)

    def test_params_mismatch_rejected(self, rng):
        cfg, params = tiny_model()
        _, other = tiny_model(seed=5)
        x = rng.standard_normal((2, 6, 2))
        _, cache = forward(params, x, cfg)
        with pytest.raises(UsageError):
            model_backward(cache, np.zeros((2, 3)), params=other)

    @pytest.mark.parametrize("mode,rho", [("full", None), ("a_input_only", None),
                                          ("input_only", None), ("full", 0.9)])
    def test_finite_difference_agreement(self, mode, rho):
        cfg, _ = tiny_model(seed=7, mode=mode, rho=rho)
        err = model_gradient_fd_error(cfg, t_len=6, batch=2,
                                      rng=np.random.default_rng(3))
        assert err <= 1e-5

    def test_grad_x0_matches_fd(self, rng):
        # x0 is fixed at zero in the model; check its reported gradient by
        # differentiating a single-block trajectory seeded at x0 directly
        from lrcssm.solver import sequential_rollout
        p = make_params(rng, 3, 2)
        x0 = rng.standard_normal(3)
        inputs = rng.standard_normal((5, 2))
        w = rng.standard_normal(3)

        def loss(x0v):
            return float(w @ sequential_rollout(x0v, inputs, p)[-1])

        states = sequential_rollout(x0, inputs, p)
        shifted = np.concatenate([x0[None], states[:-1]])
        from lrcssm.cell import step_jacobian_diag
        lam = step_jacobian_diag(shifted, inputs, p)
        adj = adjoint_reverse_scan(lam, w)
        d_x0_analytic = step_backward(x0, inputs[0], p, 1.0, adj[0])[0]
        h = 1e-6
        for i in range(3):
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (loss(xp) - loss(xm)) / (2 * h)
            assert abs(d_x0_analytic[i] - fd) <= 1e-6 * max(1, abs(fd))


class TestFlopProportionality:
    def test_backward_within_three_forward(self):
        from lrcssm.flops import counting
        from lrcssm.train import cross_entropy as ce
        for blocks in (1, 2):
            cfg, params = tiny_model(blocks=blocks)
            x = np.random.default_rng(0).standard_normal((2, 12, 2))
            with counting() as counter:
                logits, cache = forward(params, x, cfg)
            fwd = counter.total
            _, d_logits = ce(logits, np.zeros(2, dtype=np.int64))
            with counting() as counter:
                model_backward(cache, d_logits)
            bwd = counter.total
            assert 0 < bwd <= 3 * fwd
