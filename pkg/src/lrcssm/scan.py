"""Work-efficient parallel prefix scans over associative elements.

The scan pads the time axis to a power of two with identity elements and runs
a Blelloch-style up-sweep / down-sweep.  Each sweep round is one vectorized
operation over strided slices, so total work is O(T) element combines and the
number of sequential rounds is at most 2 * ceil(log2 T).  The blocking is a
fixed function of T alone, which makes results bit-identical across runs and
worker counts.

Affine elements represent maps x -> a * x + c with elementwise (diagonal)
multipliers; composition "apply e1 then e2" is

    (a2 * a1, a2 * c1 + c2)

The same machinery drives the associative Kalman-filter elements used by the
damped solver, via a generic combine over tuples of arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .flops import COUNTER as _FLOPS

FLOPS_PER_AFFINE_COMBINE = 3  # multiply-accumulates per element pair


@dataclass
class AffineElement:
    """One map x -> a * x + c with diagonal multiplier a and offset c."""

    a: np.ndarray
    c: np.ndarray


def affine_compose(e1: AffineElement, e2: AffineElement) -> AffineElement:
    """Composition "apply e1 then e2"."""
    if e1.a.shape != e2.a.shape:
        raise ConfigurationError(
            f"affine elements disagree on shape: {e1.a.shape} vs {e2.a.shape}"
        )
    return AffineElement(e2.a * e1.a, e2.a * e1.c + e2.c)


def _combine_affine(left, right):
    a1, c1 = left
    a2, c2 = right
    return a2 * a1, a2 * c1 + c2


def inclusive_scan(arrays, combine, identity):
    """Inclusive prefix scan of associative elements stored as stacked arrays.

    arrays: tuple of ndarrays, each with the time axis first.
    combine: maps (left tuple, right tuple) of array views to a result tuple.
    identity: per-array fill values of the combine's identity element.

    Returns (scanned tuple, rounds) where rounds counts the sequential
    vectorized combine rounds that ran.
    """
    t = arrays[0].shape[0]
    if t < 1:
        raise ConfigurationError("scan needs at least one element")
    if t == 1:
        return tuple(a.copy() for a in arrays), 0

    log_p = int(np.ceil(np.log2(t)))
    p = 1 << log_p
    padded = []
    for arr, fill in zip(arrays, identity):
        buf = np.full((p,) + arr.shape[1:], fill, dtype=arr.dtype)
        buf[:t] = arr
        padded.append(buf)

    rounds = 0

    def apply(dst_start, src_start, step):
        nonlocal rounds
        dst = tuple(buf[dst_start::step] for buf in padded)
        src = tuple(buf[src_start::step][: dst[0].shape[0]] for buf in padded)
        out = combine(src, dst)
        for buf_view, res in zip(dst, out):
            buf_view[...] = res
        rounds += 1
        _FLOPS.add(FLOPS_PER_AFFINE_COMBINE * len(padded) * dst[0].size)

    # Up-sweep: pairwise reduction at doubling strides.
    for d in range(log_p):
        half = 1 << d
        apply(dst_start=2 * half - 1, src_start=half - 1, step=2 * half)
    # Down-sweep: fill in the interior prefixes at halving strides.
    for d in range(log_p - 2, -1, -1):
        half = 1 << d
        apply(dst_start=3 * half - 1, src_start=2 * half - 1, step=2 * half)

    return tuple(buf[:t] for buf in padded), rounds


def scan_affine(a: np.ndarray, c: np.ndarray):
    """All prefix compositions of affine elements stacked along axis 0.

    Returns (a_scan, c_scan, rounds): row t holds the composition of elements
    0..t in order.
    """
    (a_s, c_s), rounds = inclusive_scan(
        (a, c), _combine_affine, identity=(1.0, 0.0)
    )
    return a_s, c_s, rounds


def prefix_scan_affine(elems, x0: np.ndarray) -> np.ndarray:
    """Apply every prefix composition of `elems` to x0.

    elems: sequence of AffineElement (or an (a, c) pair of (T, ..., D) arrays).
    Output row t equals (e_t o ... o e_0)(x0).
    """
    if isinstance(elems, (tuple, list)) and elems and isinstance(elems[0], AffineElement):
        a = np.stack([e.a for e in elems])
        c = np.stack([e.c for e in elems])
    else:
        a, c = elems
    a_s, c_s, _ = scan_affine(a, c)
    return a_s * x0 + c_s


def fold_affine(a: np.ndarray, c: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Sequential left fold of the affine recurrence; oracle for the scan."""
    out = np.empty_like(c)
    cur = x0
    for t in range(a.shape[0]):
        cur = a[t] * cur + c[t]
        out[t] = cur
    return out


def solve_reverse_affine(mult: np.ndarray, offs: np.ndarray,
                         terminal: np.ndarray) -> np.ndarray:
    """Solve y_t = mult_t * y_{t+1} + offs_t backwards from y_{T-1} = terminal.

    mult and offs have shape (T-1, ..., D); the result has T rows with the
    terminal value in the last row.  Implemented as a forward affine scan on
    the time-reversed elements, so it shares the scan's O(log T) depth.
    """
    t_minus_1 = mult.shape[0]
    out = np.empty((t_minus_1 + 1,) + terminal.shape, dtype=terminal.dtype)
    out[-1] = terminal
    if t_minus_1 == 0:
        return out
    body = prefix_scan_affine((mult[::-1], offs[::-1]), terminal)
    out[:-1] = body[::-1]
    return out
