"""Executable stability checks with machine-readable witnesses.

Each check returns a CheckResult carrying pass/fail plus the measured
quantities, so the CLI can emit them as delimited records and exit nonzero on
any failure.  The contraction and bound checks work on the coefficient
recurrence x' = lam * x + b, whose multiplier lam = 1 + dt * a(x, u) is the
realized per-step coefficient; the contraction radius rho_hat is measured per
run, never assumed.  Full-map variants (with gate-derivative terms included)
are reported alongside but only the coefficient-recurrence claims are
asserted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cell
from .backward import adjoint_reverse_scan, model_backward
from .model import ModelConfig, forward, init_layer_params, init_params, iter_named_arrays
from .scan import fold_affine, prefix_scan_affine, scan_affine
from .solver import SolverConfig, sequential_rollout, solve_parallel

FP_SLACK = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    witness: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        rec = {"check": self.name, "passed": self.passed}
        rec.update(self.witness)
        return rec


def _l2(v, axis=-1):
    return np.sqrt((v * v).sum(axis=axis))


def verify_contraction(p, dt=1.0, trials=10_000, seed=0, *, mode="full",
                       rho=None) -> CheckResult:
    """One coefficient-recurrence step shrinks distances by at most rho_hat.

    For every sampled anchor (x, u): with lam frozen at the anchor, the step
    v -> lam * v + b moves two points x, y closer by exactly
    ||lam * (x - y)|| / ||x - y|| <= max_i |lam_i|.  The same ratio for the
    full nonlinear map is measured and reported, not asserted.
    """
    rng = np.random.default_rng(seed)
    d, n = p.state_dim, p.input_dim
    x = rng.standard_normal((trials, d))
    y = rng.standard_normal((trials, d))
    u = rng.standard_normal((trials, n))
    ev = cell.evaluate(x, u, p, mode=mode, rho=rho)
    lam = 1.0 + dt * ev.a                   # coefficient, gate derivatives excluded
    rho_per_trial = np.abs(lam).max(axis=1)
    diff = x - y
    denom = _l2(diff)
    ok_pair = denom > 0
    ratio = np.zeros(trials)
    ratio[ok_pair] = _l2(lam[ok_pair] * diff[ok_pair]) / denom[ok_pair]
    margin = ratio - (rho_per_trial + FP_SLACK)
    passed = bool((margin <= 0).all())

    # Reported only: nonlinear two-point ratios and the full Jacobian range.
    step_x = cell.euler_step(x, u, p, dt, mode=mode, rho=rho)
    step_y = cell.euler_step(y, u, p, dt, mode=mode, rho=rho)
    full_ratio = np.zeros(trials)
    full_ratio[ok_pair] = _l2((step_x - step_y)[ok_pair]) / denom[ok_pair]
    lam_full = cell.step_jacobian_diag(x, u, p, dt, mode=mode, rho=rho)
    return CheckResult(
        "contraction", passed,
        {"trials": trials,
         "rho_hat": float(rho_per_trial.max()),
         "max_ratio": float(ratio.max()),
         "max_margin": float(margin.max()),
         "full_map_max_ratio": float(full_ratio.max()),
         "full_jacobian_max_abs": float(np.abs(lam_full).max())})


def verify_forward_bound(p, x0, t_len, dt=1.0, seed=0, *, mode="full",
                         rho=None) -> CheckResult:
    """States of the coefficient recurrence never exceed the geometric bound.

    Rolls out the real dynamics (which satisfy x_t = lam_t x_{t-1} + b_t
    exactly), measures rho_hat = max |lam| and b_max = max ||b_t||, and checks

        ||x_t|| <= rho_hat^t ||x_0|| + (1 - rho_hat^t) / (1 - rho_hat) * b_max

    at every step.
    """
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((t_len, p.input_dim))
    states = sequential_rollout(x0, inputs, p, dt, mode=mode, rho=rho)
    shifted = np.concatenate([x0[None], states[:-1]], axis=0)
    ev = cell.evaluate(shifted, inputs, p, mode=mode, rho=rho)
    lam = 1.0 + dt * ev.a
    offs = dt * ev.b
    rho_hat = float(np.abs(lam).max())
    b_max = float(_l2(offs).max())
    norms = _l2(states)
    t_idx = np.arange(1, t_len + 1)
    geo = rho_hat ** t_idx
    if rho_hat < 1.0:
        bound = geo * _l2(x0) + (1.0 - geo) / (1.0 - rho_hat) * b_max
    else:
        bound = geo * _l2(x0) + t_idx * b_max
    slack = bound * 1e-12 + 1e-12
    passed = bool((norms <= bound + slack).all())
    worst = int(np.argmax(norms - bound))
    return CheckResult(
        "forward_bound", passed,
        {"t_len": t_len, "rho_hat": rho_hat, "b_max": b_max,
         "max_state_norm": float(norms.max()),
         "worst_step": worst,
         "worst_margin": float((norms - bound)[worst])})


def verify_gradient_decay(lambdas, seed_grad, taus=None,
                          rho_hat=None) -> CheckResult:
    """Adjoint norms decay at least geometrically in the radius rho_hat.

    lambdas are a run's per-step Jacobian diagonals (gate terms included).
    By default rho_hat = max |lambda| is measured from the run; passing a
    claimed radius instead (e.g. a configured clamp value) turns this into a
    falsifiable check of that claim.  The adjoint at step tau is a product of
    T-1-tau diagonals applied to the seed, so its norm is bounded by
    rho_hat^(T-1-tau) ||seed||.  Returns the full decay curve for plotting.
    """
    lambdas = np.asarray(lambdas)
    t_len = lambdas.shape[0]
    adj = adjoint_reverse_scan(lambdas, seed_grad)
    flat = adj.reshape(t_len, -1)
    norms = _l2(flat)
    seed_norm = float(_l2(np.asarray(seed_grad).reshape(-1)))
    if rho_hat is None:
        rho_hat = float(np.abs(lambdas).max())
    steps_back = t_len - 1 - np.arange(t_len)
    bound = np.maximum(rho_hat, 1e-300) ** steps_back * seed_norm
    if taus is None:
        taus = np.arange(t_len)
    taus = np.asarray(taus)
    slack = bound * 1e-10 + 1e-300
    passed = bool((norms[taus] <= bound[taus] + slack[taus]).all())
    return CheckResult(
        "gradient_decay", passed,
        {"t_len": t_len, "rho_hat": rho_hat, "seed_norm": seed_norm,
         "max_violation": float((norms[taus] - bound[taus]).max()),
         "curve_norms": norms.tolist(),
         "curve_bound": bound.tolist()})


def verify_stack_decay(lambda_stack, seed_grad) -> CheckResult:
    """Layered variant: per-layer bounds plus their product.

    lambda_stack is a list of per-layer Jacobian diagonal arrays.  Each layer
    must satisfy its own decay bound; the product of the per-layer radii then
    bounds the product of the per-layer adjoint decay factors.
    """
    per_layer = [verify_gradient_decay(lam, seed_grad) for lam in lambda_stack]
    rho_prod = float(np.prod([r.witness["rho_hat"] for r in per_layer]))
    passed = all(r.passed for r in per_layer)
    return CheckResult(
        "stack_decay", passed,
        {"layers": len(per_layer),
         "rho_hats": [r.witness["rho_hat"] for r in per_layer],
         "rho_product": rho_prod})


def default_cell(state_dim=8, input_dim=4, seed=0, dtype=np.float64):
    """The default-initialized cell the stability suite samples."""
    return init_layer_params(np.random.default_rng(seed), state_dim, input_dim,
                             dtype)


def stability_suite(trials=10_000, t_len=2048, seed=0) -> list:
    """The three asserted checks on a default cell; used by the CLI."""
    p = default_cell(seed=seed)
    rng = np.random.default_rng(seed + 1)
    x0 = rng.standard_normal(p.state_dim)
    results = [
        verify_contraction(p, trials=trials, seed=seed),
        verify_forward_bound(p, x0, t_len, seed=seed),
    ]
    inputs = rng.standard_normal((t_len, p.input_dim))
    states = sequential_rollout(x0, inputs, p)
    shifted = np.concatenate([x0[None], states[:-1]], axis=0)
    lam = cell.step_jacobian_diag(shifted, inputs, p)
    seed_grad = rng.standard_normal(p.state_dim)
    results.append(verify_gradient_decay(lam, seed_grad))

    # layered variant, one independent cell per layer, stacks up to depth 4
    lam_stack = []
    for layer in range(4):
        pl = default_cell(p.state_dim, p.input_dim, seed=seed + 10 + layer)
        sl = sequential_rollout(x0, inputs, pl)
        shifted_l = np.concatenate([x0[None], sl[:-1]], axis=0)
        lam_stack.append(cell.step_jacobian_diag(shifted_l, inputs, pl))
    results.append(verify_stack_decay(lam_stack, seed_grad))
    return results


def run_lambdas(params, cfg: ModelConfig, batch):
    """Per-block step-Jacobian diagonals of a forward pass, for decay checks."""
    _, cache = forward(params, batch, cfg)
    return [bc.lam for bc in cache.blocks]


def solver_suite(seed=0, instances=24) -> list:
    """Oracle equivalence, fixed-point one-shot and scan checks."""
    rng = np.random.default_rng(seed)
    results = []

    worst_err = 0.0
    worst_oneshot = 0.0
    all_converged = True
    oneshot_ok = True
    for _ in range(instances):
        d = int(rng.choice([1, 4, 8]))
        n = int(rng.integers(1, 5))
        t_len = int(rng.choice([1, 2, 33, 256, 1024]))
        p = init_layer_params(rng, d, n)
        x0 = rng.standard_normal(d)
        inputs = rng.standard_normal((t_len, n))
        roll = sequential_rollout(x0, inputs, p)
        states, rep = solve_parallel(x0, inputs, p, 1.0, SolverConfig(tol=1e-9))
        worst_err = max(worst_err, float(np.max(np.abs(states - roll))))
        all_converged = all_converged and rep.converged
        _, rep2 = solve_parallel(x0, inputs, p, 1.0, SolverConfig(tol=1e-9),
                                 init_guess=roll)
        oneshot_ok = oneshot_ok and rep2.iterations == 1
        worst_oneshot = max(worst_oneshot, rep2.residuals[0])
    results.append(CheckResult(
        "oracle_equivalence", all_converged and worst_err <= 1e-8,
        {"instances": instances, "max_inf_err": worst_err,
         "all_converged": all_converged}))
    results.append(CheckResult(
        "fixed_point_one_shot", oneshot_ok and worst_oneshot <= 1e-12,
        {"instances": instances, "max_residual": worst_oneshot,
         "all_single_iteration": oneshot_ok}))

    worst_scan = 0.0
    rounds_ok = True
    for t_len in (1, 2, 3, 7, 8, 1023, 1024, 1025):
        a = rng.uniform(-0.95, 0.95, (t_len, 4))
        c = rng.standard_normal((t_len, 4))
        x0 = rng.standard_normal(4)
        got = prefix_scan_affine((a, c), x0)
        want = fold_affine(a, c, x0)
        worst_scan = max(worst_scan, float(np.max(np.abs(got - want))))
        _, _, rounds = scan_affine(a, c)
        rounds_ok = rounds_ok and rounds <= 2 * int(np.ceil(np.log2(max(t_len, 2))))
    results.append(CheckResult(
        "scan_vs_fold", worst_scan <= 1e-10 and rounds_ok,
        {"max_err": worst_scan, "rounds_within_bound": rounds_ok}))
    return results


def gradients_suite(seed=0, models=4) -> list:
    """Finite-difference agreement of the analytic backward pass."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for _ in range(8):
        d, n = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        p = init_layer_params(rng, d, n)
        x = rng.standard_normal(d)
        u = rng.standard_normal(n)
        ups = rng.standard_normal(d)
        d_x, d_u, _ = cell.step_backward(x, u, p, 1.0, ups)
        h = 1e-6
        for i in range(d):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = float(ups @ (cell.euler_step(xp, u, p) - cell.euler_step(xm, u, p))) / (2 * h)
            worst = max(worst, abs(d_x[i] - fd) / max(abs(fd), 1.0))
        for j in range(n):
            up, um = u.copy(), u.copy()
            up[j] += h
            um[j] -= h
            fd = float(ups @ (cell.euler_step(x, up, p) - cell.euler_step(x, um, p))) / (2 * h)
            worst = max(worst, abs(d_u[j] - fd) / max(abs(fd), 1.0))
    worst = float(worst)
    results.append(CheckResult("step_backward_fd", worst <= 1e-6,
                               {"max_rel_err": worst}))

    worst_model = 0.0
    for k in range(models):
        cfg = ModelConfig(input_dim=2, hidden_dim=4, state_dim=3, num_blocks=2,
                          num_classes=3, seed=seed + k,
                          solver=SolverConfig(tol=1e-12, max_iters=80))
        err = model_gradient_fd_error(cfg, t_len=6, batch=2,
                                      rng=np.random.default_rng(seed + 10 + k))
        worst_model = max(worst_model, float(err))
    results.append(CheckResult("model_backward_fd", worst_model <= 1e-5,
                               {"models": models, "max_rel_err": worst_model}))
    return results


def model_gradient_fd_error(cfg: ModelConfig, t_len: int, batch: int, rng,
                            h: float = 1e-5) -> float:
    """Worst relative disagreement between model_backward and central FD."""
    from .train import cross_entropy

    params = init_params(cfg)
    xs = rng.standard_normal((batch, t_len, cfg.input_dim))
    ys = rng.integers(0, cfg.num_classes, batch)
    logits, cache = forward(params, xs, cfg)
    _, d_logits = cross_entropy(logits, ys)
    gs = model_backward(cache, d_logits)
    grads = dict(iter_named_arrays(gs.params))
    worst = 0.0
    for name, arr in iter_named_arrays(params):
        ga = grads[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _ = cross_entropy(forward(params, xs, cfg)[0], ys)
            arr[idx] = orig - h
            lm, _ = cross_entropy(forward(params, xs, cfg)[0], ys)
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(ga[idx] - fd) / max(abs(ga[idx]), abs(fd), 1e-4))
    return worst
