"""Stacked-block classifier around the recurrent core.

Per block: pre-norm -> recurrent trajectory (solved by the configured
trajectory solver) -> two-layer GELU MLP -> skip connection back onto the
block input.  The encoder lifts each timestep, the decoder reads the
last-timestep features after a post-norm.  Everything the backward pass needs
is collected in an ActivationCache.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from . import cell
from .cell import LrcLayerParams
from .errors import ConfigurationError, NumericError
from .flops import COUNTER as _FLOPS
from .solver import SolverConfig, evaluate_trajectory

LN_EPS = 1e-5
GELU_K = float(np.sqrt(2.0 / np.pi))
PASSES_LAYER_NORM = 8
PASSES_GELU = 8


def _affine_fwd(x, w, b):
    _FLOPS.matmul(x.size // x.shape[-1], w.shape[0], w.shape[1])
    return x @ w.T + b


@dataclass
class ModelConfig:
    input_dim: int
    hidden_dim: int
    state_dim: int
    num_blocks: int
    num_classes: int
    dt: float = 1.0
    dependence_mode: str = "full"
    rho_clamp: Optional[float] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    pool: str = "last"      # "last" per the block diagram; "mean" for experiments
    dtype: str = "float64"  # training may use float32 with relaxed tolerances

    def validate(self) -> None:
        for name in ("input_dim", "hidden_dim", "state_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.num_blocks < 0:
            raise ConfigurationError("num_blocks must be >= 0")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.dependence_mode not in cell.DEPENDENCE_MODES:
            raise ConfigurationError(f"unknown dependence_mode {self.dependence_mode!r}")
        if self.rho_clamp is not None and not 0.5 < self.rho_clamp < 1.0:
            raise ConfigurationError("rho_clamp must lie in (0.5, 1)")
        if self.pool not in ("last", "mean"):
            raise ConfigurationError(f"unknown pool {self.pool!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64")
        self.solver.validate()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class BlockParams:
    norm_scale: np.ndarray   # (H,)
    norm_offset: np.ndarray  # (H,)
    lrc: LrcLayerParams      # state D, input H
    w1: np.ndarray           # (H, D)
    b1: np.ndarray           # (H,)
    w2: np.ndarray           # (H, H)
    b2: np.ndarray           # (H,)


@dataclass
class ModelParams:
    enc_w: np.ndarray        # (H, p)
    enc_b: np.ndarray        # (H,)
    blocks: list             # list[BlockParams]
    post_scale: np.ndarray   # (H,)
    post_offset: np.ndarray  # (H,)
    dec_w: np.ndarray        # (C, H)
    dec_b: np.ndarray        # (C,)


def iter_named_arrays(params):
    """Yield (name, array) over every leaf, in fixed declaration order.

    The order is the contract for checkpoints and optimizer state; it follows
    dataclass field order, with blocks indexed as blocks.<i>.<field>.
    """
    def walk(prefix, obj):
        for f in fields(obj):
            val = getattr(obj, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    yield from walk(f"{name}.{i}.", item)
            else:
                yield from walk(f"{name}.", val)
    yield from walk("", params)


def map_arrays(fn, params):
    """Structure-preserving map over every ndarray leaf."""
    def walk(obj):
        kwargs = {}
        for f in fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, np.ndarray):
                kwargs[f.name] = fn(val)
            elif isinstance(val, list):
                kwargs[f.name] = [walk(item) for item in val]
            else:
                kwargs[f.name] = walk(val)
        return type(obj)(**kwargs)
    return walk(params)


def count_params(params) -> int:
    return sum(arr.size for _, arr in iter_named_arrays(params))


def init_layer_params(rng, state_dim, input_dim, dtype=np.float64) -> LrcLayerParams:
    """Default recurrent-cell initialization.

    Gains start in (0, 1) and the leak at 0.1, so every realized transition
    coefficient 1 - dt * sig(f*) sig(eps*) begins strictly inside (0, 1) for
    dt = 1.  The elastance offsets v_x are spread over [-6, -1] instead of
    starting at zero: sig(eps*) then spans roughly [0.002, 0.27] across
    neurons, which seeds a range of memory horizons from a few steps to about
    a thousand.  With all offsets at zero every coefficient starts near 0.7
    and information more than a few dozen steps old is unrecoverable, which
    leaves long-range tasks with no gradient signal to bootstrap from.
    """
    d, n = state_dim, input_dim
    bound = 1.0 / np.sqrt(n)
    u = lambda lo, hi, *shape: rng.uniform(lo, hi, shape).astype(dtype)
    return LrcLayerParams(
        g_max_x=u(0, 1, d), g_max_u=u(0, 1, d),
        k_max_x=u(0, 1, d), k_max_u=u(0, 1, d),
        a_x=u(-0.5, 0.5, d), b_x=np.zeros(d, dtype),
        a_u=u(-bound, bound, d, n), b_u_bias=np.zeros(d, dtype),
        g_leak=np.full(d, 0.1, dtype), e_leak=u(-1, 1, d),
        w_x=u(-0.5, 0.5, d), v_x=u(-6.0, -1.0, d),
        w_u=u(-bound, bound, d, n), v_u_bias=np.zeros(d, dtype),
    )


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic initialization for a fixed cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.np_dtype
    p, h, d, c = cfg.input_dim, cfg.hidden_dim, cfg.state_dim, cfg.num_classes

    def affine(out_dim, in_dim):
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, (out_dim, in_dim)).astype(dtype)
        return w, np.zeros(out_dim, dtype)

    enc_w, enc_b = affine(h, p)
    blocks = []
    for _ in range(cfg.num_blocks):
        lrc = init_layer_params(rng, d, h, dtype)
        w1, b1 = affine(h, d)
        w2, b2 = affine(h, h)
        blocks.append(BlockParams(
            norm_scale=np.ones(h, dtype), norm_offset=np.zeros(h, dtype),
            lrc=lrc, w1=w1, b1=b1, w2=w2, b2=b2,
        ))
    dec_w, dec_b = affine(c, h)
    return ModelParams(
        enc_w=enc_w, enc_b=enc_b, blocks=blocks,
        post_scale=np.ones(h, dtype), post_offset=np.zeros(h, dtype),
        dec_w=dec_w, dec_b=dec_b,
    )


def layer_norm(x, scale, offset):
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    out, _, _ = layer_norm_fwd(x, scale, offset)
    return out


def layer_norm_fwd(x, scale, offset):
    _FLOPS.add(PASSES_LAYER_NORM * x.size)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return scale * xhat + offset, xhat, inv_std


def gelu_fwd(x):
    _FLOPS.add(PASSES_GELU * x.size)
    x2 = x * x
    inner = np.tanh(GELU_K * (x + 0.044715 * (x2 * x)))
    return 0.5 * x * (1.0 + inner), inner


def gelu_backward(d_out, x, inner):
    d_inner = GELU_K * (1.0 + 3 * 0.044715 * (x * x)) * (1.0 - inner * inner)
    return d_out * (0.5 * (1.0 + inner) + 0.5 * x * d_inner)


@dataclass
class BlockCache:
    seq_in: np.ndarray       # (T, ..., H)
    xhat: np.ndarray
    inv_std: np.ndarray
    u: np.ndarray            # norm output = recurrent input
    states: np.ndarray       # (T, ..., D) converged trajectory
    shifted: np.ndarray      # [x0, states[:-1]]
    lam: np.ndarray          # step Jacobian diagonals at the trajectory
    ev: cell.CellEval        # gate values at the trajectory
    m1: np.ndarray           # MLP pre-activation
    gelu_inner: np.ndarray
    report: object


@dataclass
class ActivationCache:
    cfg: ModelConfig
    params: ModelParams
    inputs: np.ndarray       # (T, B, p), time-major
    seq0: np.ndarray         # encoder output
    blocks: list             # list[BlockCache]
    feats: np.ndarray        # pooled features before post-norm, (B, H)
    post_xhat: np.ndarray
    post_inv_std: np.ndarray
    logits: np.ndarray

    @property
    def solve_reports(self):
        return [b.report for b in self.blocks]

    @property
    def diagnostics(self):
        notes = []
        for i, b in enumerate(self.blocks):
            if not b.report.converged:
                notes.append(
                    f"block {i}: solver hit max_iters, last residual "
                    f"{b.report.residuals[-1]:.3e}")
        return notes


def block_forward(seq, bp: BlockParams, cfg: ModelConfig):
    """One block applied to a time-major sequence; returns (out, BlockCache)."""
    u, xhat, inv_std = layer_norm_fwd(seq, bp.norm_scale, bp.norm_offset)
    x0 = np.zeros(seq.shape[1:-1] + (cfg.state_dim,), dtype=seq.dtype)
    terms = cell.input_terms(u, bp.lrc)
    states, report = evaluate_trajectory(
        x0, u, bp.lrc, cfg.dt, cfg.solver,
        mode=cfg.dependence_mode, rho=cfg.rho_clamp, terms=terms)
    shifted = np.empty_like(states)
    shifted[0] = x0
    shifted[1:] = states[:-1]
    # One extra gate pass at the converged trajectory: backward differentiates
    # the fixed point itself, not the Newton iterates.
    _, lam, ev = cell.step_with_jacobian(
        shifted, u, bp.lrc, cfg.dt, mode=cfg.dependence_mode, rho=cfg.rho_clamp,
        it=terms)
    m1 = _affine_fwd(states, bp.w1, bp.b1)
    g, inner = gelu_fwd(m1)
    out = seq + _affine_fwd(g, bp.w2, bp.b2)
    cache = BlockCache(seq, xhat, inv_std, u, states, shifted, lam, ev, m1,
                       inner, report)
    return out, cache


def forward(params: ModelParams, batch, cfg: ModelConfig):
    """Classify a (B, T, p) batch; returns (logits (B, C), ActivationCache)."""
    if batch.ndim != 3 or batch.shape[2] != cfg.input_dim:
        raise ConfigurationError(
            f"batch shape {batch.shape}, expected (B, T, {cfg.input_dim})")
    inputs = np.ascontiguousarray(batch.transpose(1, 0, 2), dtype=cfg.np_dtype)
    seq = _affine_fwd(inputs, params.enc_w, params.enc_b)
    seq0 = seq
    block_caches = []
    for i, bp in enumerate(params.blocks):
        seq, bc = block_forward(seq, bp, cfg)
        block_caches.append(bc)
        if not np.all(np.isfinite(seq)):
            raise NumericError(f"non-finite activations after block {i}", where=i)
    feats = seq.mean(axis=0) if cfg.pool == "mean" else seq[-1]
    normed, post_xhat, post_inv_std = layer_norm_fwd(
        feats, params.post_scale, params.post_offset)
    logits = _affine_fwd(normed, params.dec_w, params.dec_b)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits at decoder", where=len(params.blocks))
    cache = ActivationCache(cfg, params, inputs, seq0, block_caches, feats,
                            post_xhat, post_inv_std, logits)
    return logits, cache
