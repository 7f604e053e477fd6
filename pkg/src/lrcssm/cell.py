"""Liquid-resistance liquid-capacitance cell with a diagonal-by-construction Jacobian.

Every gate couples a neuron only to its own state (self-loop parameters) while
the full input vector enters through dense mixing matrices, so one Euler step

    x' = x + dt * (a(x, u) * x + b(x, u))

has a one-step Jacobian d x'_i / d x_j that is exactly diagonal.  Per neuron i:

    sx_i   = sig(a_x_i * x_i + b_x_i)                    self-loop channel
    su_i   = sig((a_u @ u)_i + b_u_i)                    input channel
    f*_i   = g_max_x_i * sx_i + g_max_u_i * su_i + g_leak_i
    z*_i   = k_max_x_i * sx_i + k_max_u_i * su_i + g_leak_i
    eps*_i = w_x_i * x_i + v_x_i + (w_u @ u)_i + v_u_i

    a_i = -sig(f*_i) * sig(eps*_i)           (diagonal transition entry)
    b_i =  tanh(z*_i) * sig(eps*_i) * e_leak_i

sig(f*) plays the role of a liquid resistance and sig(eps*) of a liquid
elastance (reciprocal capacitance); both lie in (0, 1), so with dt = 1 the
realized coefficient 1 + dt * a_i stays inside (0, 1) whenever the gate
derivatives vanish.

Dependence modes ablate the state coupling:

    full          a(x, u), b(x, u)   (default)
    a_input_only  a(u),    b(x, u)   a_x and w_x zeroed inside f*/eps* for `a` only
    input_only    a(u),    b(u)      additionally zeroes a_x, w_x, k_max_x everywhere

``input_only`` is implemented by evaluating the full formulas with zeroed
copies of a_x, w_x, k_max_x, which makes it bitwise-equal to a full-mode cell
whose stored state parameters are zero.

All operations broadcast over arbitrary leading axes: x has shape (..., D) and
u has shape (..., n).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, NumericError
from .flops import COUNTER as _FLOPS

DEPENDENCE_MODES = ("full", "a_input_only", "input_only")

# Elementwise array passes per call site, used by the instrumented counter.
PASSES_INPUT_TERMS = 9
PASSES_EVALUATE = 24
PASSES_JACOBIAN = 26
PASSES_STEP_BACKWARD = 55


@dataclass
class LrcLayerParams:
    """Learnable per-layer parameters. Vectors have shape (D,), matrices (D, n)."""

    g_max_x: np.ndarray   # conductance gain, state branch
    g_max_u: np.ndarray   # conductance gain, input branch
    k_max_x: np.ndarray   # signed gain, state branch
    k_max_u: np.ndarray   # signed gain, input branch
    a_x: np.ndarray       # self-loop pre-activation slope
    b_x: np.ndarray       # self-loop pre-activation offset
    a_u: np.ndarray       # input pre-activation weights, (D, n)
    b_u_bias: np.ndarray  # input pre-activation offset, one per neuron
    g_leak: np.ndarray    # leak conductance
    e_leak: np.ndarray    # leak potential
    w_x: np.ndarray       # elastance self weight
    v_x: np.ndarray       # elastance self offset
    w_u: np.ndarray       # elastance input weights, (D, n)
    v_u_bias: np.ndarray  # elastance input offset, one per neuron

    @property
    def state_dim(self) -> int:
        return self.g_max_x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.a_u.shape[1]

    def validate(self) -> None:
        d, n = self.state_dim, self.input_dim
        for f in fields(self):
            arr = getattr(self, f.name)
            want = (d, n) if f.name in ("a_u", "w_u") else (d,)
            if arr.shape != want:
                raise ConfigurationError(
                    f"LrcLayerParams.{f.name}: shape {arr.shape}, expected {want}"
                )
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"LrcLayerParams.{f.name}: non-finite entries")


@dataclass
class GateValues:
    """Pre-squash gate values, each shaped like the state."""

    f_star: np.ndarray
    z_star: np.ndarray
    eps_star: np.ndarray


@dataclass
class CellEval:
    """Everything one gate evaluation produces; reused by Jacobian and VJPs.

    ``sig_eps_a`` / ``sig_eps_b`` (and ``sx_a`` / ``sx_b``) alias the same
    array except in a_input_only mode, where the `a` branch sees masked
    state parameters and the `b` branch does not.
    """

    sx_a: np.ndarray       # sig(a_x x + b_x), a branch
    sx_b: np.ndarray       # sig(a_x x + b_x), b branch
    su: np.ndarray         # sig(a_u u + b_u)
    sig_f: np.ndarray      # sig(f*)
    tanh_z: np.ndarray     # tanh(z*)
    sig_eps_a: np.ndarray  # sig(eps*), a branch
    sig_eps_b: np.ndarray  # sig(eps*), b branch
    a: np.ndarray          # diagonal transition entries (after optional clamp)
    b: np.ndarray          # offset entries


@dataclass
class CellGrads:
    """Parameter gradients mirroring LrcLayerParams shapes."""

    g_max_x: np.ndarray
    g_max_u: np.ndarray
    k_max_x: np.ndarray
    k_max_u: np.ndarray
    a_x: np.ndarray
    b_x: np.ndarray
    a_u: np.ndarray
    b_u_bias: np.ndarray
    g_leak: np.ndarray
    e_leak: np.ndarray
    w_x: np.ndarray
    v_x: np.ndarray
    w_u: np.ndarray
    v_u_bias: np.ndarray


def sigmoid(y: np.ndarray) -> np.ndarray:
    # Overflow-safe and single transcendental pass: sig(y) = (1 + tanh(y/2)) / 2.
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def _check_shapes(x: np.ndarray, u: np.ndarray, p: LrcLayerParams) -> None:
    if x.shape[-1] != p.state_dim:
        raise ConfigurationError(
            f"state has {x.shape[-1]} features, parameters expect {p.state_dim}"
        )
    if u.shape[-1] != p.input_dim:
        raise ConfigurationError(
            f"input has {u.shape[-1]} features, parameters expect {p.input_dim}"
        )


def _effective_state_params(p: LrcLayerParams, mode: str):
    """Per-branch views of the state-coupling parameters for a dependence mode.

    Returns (ax_a, wx_a, kmx, ax_b, wx_b).  Masked entries are zero arrays, so
    masked modes follow the exact same arithmetic as full mode with zeroed
    parameters.
    """
    if mode == "full":
        return p.a_x, p.w_x, p.k_max_x, p.a_x, p.w_x
    zero = np.zeros_like(p.a_x)
    if mode == "a_input_only":
        return zero, zero, p.k_max_x, p.a_x, p.w_x
    if mode == "input_only":
        return zero, zero, zero, zero, zero
    raise ConfigurationError(f"unknown dependence mode {mode!r}")


def _clamp_coeffs(rho):
    """Affine remap of the gate product g = sig(f*)sig(eps*) onto (1-rho, rho).

    With g' = (1-rho) + (2rho-1) g the realized coefficient 1 - dt*g' lies in
    [1-rho, rho] for dt = 1 and rho in (0.5, 1).  rho=None disables the remap.
    """
    if rho is None:
        return 0.0, 1.0
    if not 0.5 < rho < 1.0:
        raise ConfigurationError(f"rho clamp must lie in (0.5, 1), got {rho}")
    return 1.0 - rho, 2.0 * rho - 1.0


@dataclass
class InputTerms:
    """Input-dependent gate contributions; constant across solver iterations."""

    su: np.ndarray      # sig(a_u u + b_u)
    f_u: np.ndarray     # g_max_u * su + g_leak
    z_u: np.ndarray     # k_max_u * su + g_leak
    eps_u: np.ndarray   # w_u u + v_u + v_x

    def at(self, t):
        return InputTerms(self.su[t], self.f_u[t], self.z_u[t], self.eps_u[t])


def input_terms(u, p: LrcLayerParams) -> InputTerms:
    su = sigmoid(u @ p.a_u.T + p.b_u_bias)
    if _FLOPS.enabled:
        points = su.size // p.state_dim
        _FLOPS.matmul(points, p.state_dim, p.input_dim)
        _FLOPS.matmul(points, p.state_dim, p.input_dim)
        _FLOPS.add(PASSES_INPUT_TERMS * su.size)
    return InputTerms(
        su=su,
        f_u=p.g_max_u * su + p.g_leak,
        z_u=p.k_max_u * su + p.g_leak,
        eps_u=u @ p.w_u.T + p.v_u_bias + p.v_x,
    )


def evaluate_at(x, it: InputTerms, p, *, mode="full", rho=None) -> CellEval:
    """State-dependent half of the gate evaluation, given cached input terms."""
    ax_a, wx_a, kmx, ax_b, wx_b = _effective_state_params(p, mode)
    _FLOPS.add(PASSES_EVALUATE * x.size)

    sx_a = sigmoid(ax_a * x + p.b_x)
    # In full and input_only modes both branches share the same self-loop
    # channel, so reuse the array instead of recomputing it.
    sx_b = sx_a if ax_a is ax_b else sigmoid(ax_b * x + p.b_x)

    f_star = p.g_max_x * sx_a + it.f_u
    z_star = kmx * sx_b + it.z_u
    sig_eps_a = sigmoid(wx_a * x + it.eps_u)
    sig_eps_b = sig_eps_a if wx_a is wx_b else sigmoid(wx_b * x + it.eps_u)

    sig_f = sigmoid(f_star)
    tanh_z = np.tanh(z_star)
    off, slope = _clamp_coeffs(rho)
    a = -(off + slope * (sig_f * sig_eps_a))
    b = tanh_z * sig_eps_b * p.e_leak
    return CellEval(sx_a, sx_b, it.su, sig_f, tanh_z, sig_eps_a, sig_eps_b, a, b)


def evaluate(x, u, p, *, mode="full", rho=None) -> CellEval:
    """Evaluate all gates plus the (a, b) pair at (x, u)."""
    _check_shapes(x, u, p)
    return evaluate_at(x, input_terms(u, p), p, mode=mode, rho=rho)


def gates(x, u, p: LrcLayerParams) -> GateValues:
    """Pre-squash gate values f*, z*, eps* (unmasked)."""
    _check_shapes(x, u, p)
    sx = sigmoid(p.a_x * x + p.b_x)
    su = sigmoid(u @ p.a_u.T + p.b_u_bias)
    f_star = p.g_max_x * sx + p.g_max_u * su + p.g_leak
    z_star = p.k_max_x * sx + p.k_max_u * su + p.g_leak
    eps_star = p.w_x * x + p.v_x + u @ p.w_u.T + p.v_u_bias
    return GateValues(f_star, z_star, eps_star)


def a_diag(x, u, p, *, mode="full", rho=None) -> np.ndarray:
    """Entries of the diagonal transition, -sig(f*) sig(eps*)."""
    return evaluate(x, u, p, mode=mode, rho=rho).a


def b_vec(x, u, p, *, mode="full", rho=None) -> np.ndarray:
    """Offset entries, tanh(z*) sig(eps*) e_leak."""
    return evaluate(x, u, p, mode=mode, rho=rho).b


def drift(x, u, p, *, mode="full", rho=None) -> np.ndarray:
    """State derivative a(x, u) * x + b(x, u)."""
    ev = evaluate(x, u, p, mode=mode, rho=rho)
    return ev.a * x + ev.b


def euler_step(x, u, p, dt=1.0, *, mode="full", rho=None) -> np.ndarray:
    """One explicit Euler step x + dt * drift(x, u)."""
    out = x + dt * drift(x, u, p, mode=mode, rho=rho)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise NumericError(f"euler_step produced a non-finite value at flat index {bad}",
                           where=bad)
    return out


def _jacobian_from_eval(x, p, ev: CellEval, dt, mode, rho):
    ax_a, wx_a, kmx, ax_b, wx_b = _effective_state_params(p, mode)
    _, slope = _clamp_coeffs(rho)
    _FLOPS.add(PASSES_JACOBIAN * x.size)
    d_sig_f = ev.sig_f * (1.0 - ev.sig_f)
    d_sx_a = ev.sx_a * (1.0 - ev.sx_a)
    d_sx_b = d_sx_a if ev.sx_b is ev.sx_a else ev.sx_b * (1.0 - ev.sx_b)
    d_eps_a = ev.sig_eps_a * (1.0 - ev.sig_eps_a)
    d_eps_b = (d_eps_a if ev.sig_eps_b is ev.sig_eps_a
               else ev.sig_eps_b * (1.0 - ev.sig_eps_b))
    d_tanh_z = 1.0 - ev.tanh_z * ev.tanh_z

    # d a_i / d x_i, via the product rule through sig(f*) and sig(eps*);
    # parameter-only products stay (D,)-sized before broadcasting.
    da_dx = -slope * (
        d_sig_f * d_sx_a * (p.g_max_x * ax_a) * ev.sig_eps_a
        + ev.sig_f * d_eps_a * wx_a
    )
    # d b_i / d x_i, through tanh(z*) and sig(eps*)
    db_dx = p.e_leak * (
        d_tanh_z * d_sx_b * (kmx * ax_b) * ev.sig_eps_b
        + ev.tanh_z * d_eps_b * wx_b
    )
    return 1.0 + dt * (ev.a + x * da_dx + db_dx)


def step_jacobian_diag(x, u, p, dt=1.0, *, mode="full", rho=None) -> np.ndarray:
    """Analytic diagonal of d euler_step / d x.

    Off-diagonal entries of the true Jacobian are identically zero because
    every gate touches only its own state coordinate.
    """
    ev = evaluate(x, u, p, mode=mode, rho=rho)
    return _jacobian_from_eval(x, p, ev, dt, mode, rho)


def step_with_jacobian(x, u, p, dt=1.0, *, mode="full", rho=None, it=None):
    """(euler_step output, Jacobian diagonal, CellEval) from one gate pass.

    Pass precomputed InputTerms via `it` to skip the input-side work; the
    solver does this across Newton iterations since u never changes.
    """
    if it is None:
        _check_shapes(x, u, p)
        it = input_terms(u, p)
    ev = evaluate_at(x, it, p, mode=mode, rho=rho)
    out = x + dt * (ev.a * x + ev.b)
    lam = _jacobian_from_eval(x, p, ev, dt, mode, rho)
    return out, lam, ev


def step_backward(x_prev, u, p, dt, upstream, *, mode="full", rho=None,
                  ev: CellEval | None = None):
    """VJP of euler_step at cached (x_prev, u) for an upstream cotangent.

    Arrays broadcast over leading axes; parameter gradients are summed over
    them.  Returns (d_x_prev, d_u, CellGrads).
    """
    _check_shapes(x_prev, u, p)
    if ev is None:
        ev = evaluate(x_prev, u, p, mode=mode, rho=rho)
    ax_a, wx_a, kmx, ax_b, wx_b = _effective_state_params(p, mode)
    _, slope = _clamp_coeffs(rho)
    if _FLOPS.enabled:
        points = upstream.size // p.state_dim
        for _ in range(4):  # d_u (x2) and the two input-matrix gradients
            _FLOPS.matmul(points, p.state_dim, p.input_dim)
        _FLOPS.add(PASSES_STEP_BACKWARD * upstream.size)

    lead = tuple(range(upstream.ndim - 1))  # axes to sum for parameter grads

    d_a = upstream * dt * x_prev          # through a * x
    d_b = upstream * dt                   # through b
    d_x = upstream * (1.0 + dt * ev.a)    # explicit x term

    # a = -(off + slope * sig_f * sig_eps_a)
    d_prod = -slope * d_a
    d_sig_f = d_prod * ev.sig_eps_a
    d_sig_eps_a = d_prod * ev.sig_f
    # b = tanh_z * sig_eps_b * e_leak
    d_tanh_z = d_b * ev.sig_eps_b * p.e_leak
    d_sig_eps_b = d_b * ev.tanh_z * p.e_leak
    g_e_leak = (d_b * ev.tanh_z * ev.sig_eps_b).sum(axis=lead)

    d_f = d_sig_f * ev.sig_f * (1.0 - ev.sig_f)
    d_z = d_tanh_z * (1.0 - ev.tanh_z * ev.tanh_z)
    d_eps_a = d_sig_eps_a * ev.sig_eps_a * (1.0 - ev.sig_eps_a)
    d_eps_b = d_sig_eps_b * ev.sig_eps_b * (1.0 - ev.sig_eps_b)

    # f* = g_max_x sx_a + g_max_u su + g_leak; z* = kmx sx_b + k_max_u su + g_leak
    g_g_max_x = (d_f * ev.sx_a).sum(axis=lead)
    g_g_max_u = (d_f * ev.su).sum(axis=lead)
    g_k_max_u = (d_z * ev.su).sum(axis=lead)
    g_g_leak = (d_f + d_z).sum(axis=lead)
    d_sx_a = d_f * p.g_max_x
    d_sx_b = d_z * kmx
    d_su = d_f * p.g_max_u + d_z * p.k_max_u

    # self-loop channels sig(ax x + b_x); the two branches share b_x
    d_pre_a = d_sx_a * ev.sx_a * (1.0 - ev.sx_a)
    d_pre_b = d_sx_b * ev.sx_b * (1.0 - ev.sx_b)
    g_b_x = (d_pre_a + d_pre_b).sum(axis=lead)
    d_x = d_x + d_pre_a * ax_a + d_pre_b * ax_b

    # input channel sig(a_u u + b_u)
    d_pre_u = d_su * ev.su * (1.0 - ev.su)
    flat_du = d_pre_u.reshape(-1, p.state_dim)
    flat_u = u.reshape(-1, p.input_dim)
    g_a_u = flat_du.T @ flat_u
    g_b_u = d_pre_u.sum(axis=lead)
    d_u = d_pre_u @ p.a_u

    # elastance eps = wx x + v_x + w_u u + v_u, per branch
    d_eps = d_eps_a + d_eps_b
    g_v_x = d_eps.sum(axis=lead)
    g_v_u = g_v_x.copy()
    flat_de = d_eps.reshape(-1, p.state_dim)
    g_w_u = flat_de.T @ flat_u
    d_u = d_u + d_eps @ p.w_u
    d_x = d_x + d_eps_a * wx_a + d_eps_b * wx_b

    # Map branch gradients back to the stored parameters: masked uses see a
    # constant zero, so their contribution is dropped.
    if mode == "full":
        g_a_x = ((d_pre_a + d_pre_b) * x_prev).sum(axis=lead)
        g_w_x = ((d_eps_a + d_eps_b) * x_prev).sum(axis=lead)
        g_k_max_x = (d_z * ev.sx_b).sum(axis=lead)
    elif mode == "a_input_only":
        g_a_x = (d_pre_b * x_prev).sum(axis=lead)
        g_w_x = (d_eps_b * x_prev).sum(axis=lead)
        g_k_max_x = (d_z * ev.sx_b).sum(axis=lead)
    else:  # input_only
        g_a_x = np.zeros_like(p.a_x)
        g_w_x = np.zeros_like(p.w_x)
        g_k_max_x = np.zeros_like(p.k_max_x)

    grads = CellGrads(
        g_max_x=g_g_max_x, g_max_u=g_g_max_u, k_max_x=g_k_max_x, k_max_u=g_k_max_u,
        a_x=g_a_x, b_x=g_b_x, a_u=g_a_u, b_u_bias=g_b_u, g_leak=g_g_leak,
        e_leak=g_e_leak, w_x=g_w_x, v_x=g_v_x, w_u=g_w_u, v_u_bias=g_v_u,
    )
    return d_x, d_u, grads
