"""Cost model and runtime measurements for the trajectory solver.

The closed-form estimate counts multiply-accumulates on the recurrent state
path, so it is exactly proportional to each of sequence length T, state width
D and depth L.  Width-only work (the H x H MLP matmul, norms, GELU) and the
constant-size stem/head (encoder, decoder) are excluded from the estimate;
they are included in the instrumented counter, and the estimate-vs-measured
comparison is expected to agree within 2x, not exactly.

Per (timestep x batch element x layer), in multiply-accumulates:

    input terms      4 D H + 9 D      two (D, H) matmuls plus elementwise
    newton iteration 55 D             gate eval + Jacobian + affine offset
    scan solve       12 D             up/down sweep combines, both arrays
    trajectory cache 55 D             one converged gate + Jacobian pass
    mlp (state side) 2 D H            the D -> H matmul
    backward         12 D H + 80 D    gate VJP matmuls, reverse scan, MLP VJP

Wall-clock methodology: one discarded warm-up run, then best of three on a
monotonic clock.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .flops import counting
from .model import ModelConfig, init_layer_params
from .scan import scan_affine
from .solver import SolverConfig, sequential_rollout, solve_parallel

DEFAULT_NEWTON_ITERS = 6


@dataclass
class FlopModel:
    """Per-point multiply-accumulate constants for the state path."""

    input_terms_matmul: int = 4   # x D H
    input_terms_elem: int = 9     # x D
    newton_iter: int = 55         # x D, per iteration
    scan: int = 12                # x D, per iteration
    cache_pass: int = 55          # x D
    mlp_state: int = 2            # x D H
    backward_matmul: int = 12     # x D H
    backward_elem: int = 80       # x D

    def per_point(self, state_dim: int, hidden_dim: int, newton_iters: int) -> int:
        d, h = state_dim, hidden_dim
        fwd = (self.input_terms_matmul * d * h + self.input_terms_elem * d
               + newton_iters * (self.newton_iter + self.scan) * d
               + self.cache_pass * d + self.mlp_state * d * h)
        bwd = self.backward_matmul * d * h + self.backward_elem * d
        return fwd + bwd


def flop_estimate(cfg: ModelConfig, t_len: int, batch: int,
                  newton_iters: int = DEFAULT_NEWTON_ITERS,
                  model: FlopModel | None = None) -> int:
    """Closed-form forward+backward cost; linear in each of T, D and L."""
    model = model or FlopModel()
    per_point = model.per_point(cfg.state_dim, cfg.hidden_dim, newton_iters)
    return batch * t_len * cfg.num_blocks * per_point


def measured_flops(params, cfg: ModelConfig, batch):
    """Instrumented multiply-accumulate count of one forward+backward pass."""
    from .backward import model_backward
    from .model import forward
    from .train import cross_entropy

    labels = np.zeros(batch.shape[0], dtype=np.int64)
    with counting() as counter:
        logits, cache = forward(params, batch, cfg)
        _, d_logits = cross_entropy(logits, labels)
        model_backward(cache, d_logits)
    iters = [r.iterations for r in cache.solve_reports]
    return counter.total, float(np.mean(iters)) if iters else 0.0


def _best_of(fn, repeats=3):
    fn()  # warm-up, discarded
    best = float("inf")
    for _ in range(repeats):
        t0 = time.monotonic()
        out = fn()
        best = min(best, time.monotonic() - t0)
    return best, out


@dataclass
class BenchCase:
    t_len: int
    threads: int
    seq_wall_s: float
    par_wall_s: float
    newton_iters: int
    scan_rounds: int
    scan_rounds_bound: int
    speedup: float
    solves_per_s: float

    def as_record(self) -> dict:
        return dict(self.__dict__)


def runtime_scaling(t_lens, threads_list=(1,), state_dim=16, input_dim=4,
                    seed=0, repeats=3, tol=1e-6) -> list:
    """Wall-clock scaling of sequential vs parallel solves.

    For each T: one sequential rollout and one parallel solve are timed
    best-of-`repeats`; the threads axis measures throughput of that many
    concurrent independent solves on disjoint data (solves are internally
    synchronous).  Returns a list of BenchCase records.
    """
    rng = np.random.default_rng(seed)
    p = init_layer_params(rng, state_dim, input_dim)
    cfg = SolverConfig(tol=tol, max_iters=50)
    rows = []
    for t_len in t_lens:
        x0 = rng.standard_normal(state_dim)
        inputs = rng.standard_normal((t_len, input_dim))
        seq_wall, _ = _best_of(lambda: sequential_rollout(x0, inputs, p),
                               repeats)
        par_wall, (_, report) = _best_of(
            lambda: solve_parallel(x0, inputs, p, 1.0, cfg), repeats)
        per_iter_rounds = (report.scan_rounds // report.iterations
                           if report.iterations else 0)
        bound = 2 * int(np.ceil(np.log2(max(t_len, 2))))
        for threads in threads_list:
            if threads == 1:
                wall = par_wall
            else:
                work = [(rng.standard_normal(state_dim),
                         rng.standard_normal((t_len, input_dim)))
                        for _ in range(threads)]

                def batch_run():
                    with ThreadPoolExecutor(max_workers=threads) as pool:
                        list(pool.map(
                            lambda w: solve_parallel(w[0], w[1], p, 1.0, cfg),
                            work))

                wall_all, _ = _best_of(batch_run, repeats)
                wall = wall_all / threads
            rows.append(BenchCase(
                t_len=t_len, threads=threads, seq_wall_s=seq_wall,
                par_wall_s=wall, newton_iters=report.iterations,
                scan_rounds=per_iter_rounds, scan_rounds_bound=bound,
                speedup=seq_wall / wall if wall > 0 else float("inf"),
                solves_per_s=1.0 / wall if wall > 0 else float("inf")))
    return rows


def scan_depth_table(t_lens, state_dim=8, seed=0) -> list:
    """Measured scan sync rounds vs the 2 ceil(log2 T) bound."""
    rng = np.random.default_rng(seed)
    rows = []
    for t_len in t_lens:
        a = rng.uniform(0.1, 0.99, (t_len, state_dim))
        c = rng.standard_normal((t_len, state_dim))
        _, _, rounds = scan_affine(a, c)
        bound = 2 * int(np.ceil(np.log2(max(t_len, 2))))
        rows.append({"t_len": t_len, "rounds": rounds, "bound": bound,
                     "within_bound": rounds <= bound})
    return rows
