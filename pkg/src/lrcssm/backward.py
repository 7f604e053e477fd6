"""Exact reverse-mode differentiation of the full model.

The backward pass through the recurrence is itself a diagonal linear
recurrence,

    g_t = d_t + lam_{t+1} * g_{t+1},

where d_t is the gradient injected at step t by the rest of the network and
lam the cached step-Jacobian diagonals.  It is solved with one reverse affine
prefix scan, so backward shares the forward pass's O(log T) sequential depth.
Parameter gradients then follow from one vectorized VJP over all steps.

The trajectory returned by the parallel solver is the recurrence's fixed
point, which equals the sequential rollout, so backpropagating through the
cached trajectory is exact; the Newton iterates themselves never need to be
differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cell
from .errors import UsageError
from .flops import COUNTER as _FLOPS
from .model import (ActivationCache, ModelParams, gelu_backward, gelu_fwd,
                    iter_named_arrays, map_arrays)
from .scan import solve_reverse_affine


@dataclass
class GradientSet:
    """Gradients in one-to-one correspondence with ModelParams, plus the
    gradient flowing into each block's initial state."""

    params: ModelParams
    grad_x0: list  # per block, shaped like that block's x0


def zeros_like_params(params: ModelParams) -> ModelParams:
    return map_arrays(np.zeros_like, params)


def step_backward(x_prev, u, p, dt, upstream, *, mode="full", rho=None):
    """Single-step VJP; see cell.step_backward.

    d_x_prev is the diagonal product lam * upstream; d_u and the parameter
    gradients follow the analytic chain rule through the gates.
    """
    return cell.step_backward(x_prev, u, p, dt, upstream, mode=mode, rho=rho)


def adjoint_reverse_scan(lambdas: np.ndarray, seed_grad: np.ndarray) -> np.ndarray:
    """Adjoint state for a loss on the final step only.

    Row t receives (prod_{s>t} lambdas[s]) * seed_grad; the last row is the
    seed itself.  Equivalent to the sequential backward recurrence, computed
    by reverse affine scan.
    """
    t_len = lambdas.shape[0]
    seed = np.broadcast_to(seed_grad, lambdas.shape[1:]).astype(lambdas.dtype)
    if t_len == 1:
        out = np.empty_like(lambdas)
        out[0] = seed
        return out
    offs = np.zeros_like(lambdas[1:])
    return solve_reverse_affine(lambdas[1:], offs, seed)


def _layer_norm_backward(d_out, xhat, inv_std, scale):
    lead = tuple(range(d_out.ndim - 1))
    d_scale = (d_out * xhat).sum(axis=lead)
    d_offset = d_out.sum(axis=lead)
    d_xhat = d_out * scale
    n = xhat.shape[-1]
    d_x = inv_std * (
        d_xhat
        - d_xhat.mean(axis=-1, keepdims=True)
        - xhat * (d_xhat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return d_x, d_scale, d_offset


def _affine_backward(d_out, x, w):
    """VJP of y = x @ w.T + b with leading axes flattened for the weight grad."""
    points = d_out.size // d_out.shape[-1]
    _FLOPS.matmul(points, w.shape[0], w.shape[1])
    _FLOPS.matmul(points, w.shape[0], w.shape[1])
    d_w = d_out.reshape(-1, d_out.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    d_b = d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)
    d_x = d_out @ w
    return d_x, d_w, d_b


def model_backward(cache: ActivationCache, d_logits, params=None) -> GradientSet:
    """Full-model gradients from cached activations and a logits cotangent.

    If `params` is given it must be the object the cache was built with.
    """
    if params is not None and params is not cache.params:
        raise UsageError("cache was produced by different parameters")
    params = cache.params
    cfg = cache.cfg
    grads = zeros_like_params(params)
    grad_x0 = []

    d_logits = np.asarray(d_logits, dtype=cache.logits.dtype)
    normed = cache.post_xhat * params.post_scale + params.post_offset
    d_normed, grads.dec_w[...], grads.dec_b[...] = _affine_backward(
        d_logits, normed, params.dec_w)
    d_feats, d_pscale, d_poffset = _layer_norm_backward(
        d_normed, cache.post_xhat, cache.post_inv_std, params.post_scale)
    grads.post_scale[...] = d_pscale
    grads.post_offset[...] = d_poffset

    t_len = cache.inputs.shape[0]
    seq_shape = cache.seq0.shape
    d_seq = np.zeros(seq_shape, dtype=cache.seq0.dtype)
    if cfg.pool == "mean":
        d_seq += d_feats / t_len
    else:
        d_seq[-1] = d_feats

    for bc, bp, gb in zip(reversed(cache.blocks), reversed(params.blocks),
                          reversed(grads.blocks)):
        # skip: out = seq_in + mlp(states)
        d_mlp_out = d_seq
        g_act, _ = gelu_fwd(bc.m1)
        d_g, gb.w2[...], gb.b2[...] = _affine_backward(d_mlp_out, g_act, bp.w2)
        d_m1 = gelu_backward(d_g, bc.m1, bc.gelu_inner)
        d_states_inj, gb.w1[...], gb.b1[...] = _affine_backward(
            d_m1, bc.states, bp.w1)

        # Backward through the recurrence: total_t = inj_t + lam_{t+1} total_{t+1}
        if t_len == 1:
            total = d_states_inj
        else:
            total = solve_reverse_affine(
                bc.lam[1:], d_states_inj[:-1], d_states_inj[-1])
        d_shift, d_u, cg = cell.step_backward(
            bc.shifted, bc.u, bp.lrc, cfg.dt, total,
            mode=cfg.dependence_mode, rho=cfg.rho_clamp, ev=bc.ev)
        for name, arr in iter_named_arrays(cg):
            getattr(gb.lrc, name)[...] = arr
        lead = tuple(range(d_shift.ndim - 2))
        grad_x0.append(d_shift[0].sum(axis=lead) if lead else d_shift[0])

        d_norm_in, gb.norm_scale[...], gb.norm_offset[...] = _layer_norm_backward(
            d_u, bc.xhat, bc.inv_std, bp.norm_scale)
        d_seq = d_seq + d_norm_in

    _, grads.enc_w[...], grads.enc_b[...] = _affine_backward(
        d_seq, cache.inputs, params.enc_w)
    grad_x0.reverse()
    return GradientSet(params=grads, grad_x0=grad_x0)
