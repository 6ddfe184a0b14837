"""Selective state-space cell: input-dependent parameters, zero-order-hold
discretization and the linear-time recurrent scan.

The transition is diagonal: channel ``c`` and state ``s`` evolve as

    h[t, c, s] = w_y[t, c, s] * y[t, c] + w_h[t, c, s] * h[t-1, c, s]
    z[t, c]    = sum_s c_t[s] * h[t, c, s] + d[c] * y[t, c]

with ``w_h = exp(delta * a)`` and ``w_y = expm1(delta * a) / a * b_t[s]``.
"""
import math
from dataclasses import dataclass

import numba
import numpy as np

from .numerics import instrument
from .numerics.module import Linear, Module
from .numerics.tensor import (
    NumericError,
    Tensor,
    exp,
    get_default_dtype,
    make_result,
    neg,
    parameter,
    softplus,
)

DELTA_MIN = 1e-3
DELTA_MAX = 1e-1


class SsmParams(Module):
    """Learned parameters of one selective SSM over ``channel_dim`` channels."""

    def __init__(self, channel_dim, state_dim, rng):
        self.channel_dim = channel_dim
        self.state_dim = state_dim
        dtype = get_default_dtype()
        # -a_bar log-uniform over [1, S], identical per channel
        rates = np.geomspace(1.0, max(state_dim, 1), state_dim)
        self.a_log = parameter(np.tile(np.log(rates), (channel_dim, 1)).astype(dtype))
        self.delta_proj = Linear(channel_dim, channel_dim, rng)
        dt = rng.uniform(DELTA_MIN, DELTA_MAX, size=channel_dim)
        self.delta_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(dtype)
        self.b_proj = Linear(channel_dim, state_dim, rng)
        self.c_proj = Linear(channel_dim, state_dim, rng)
        self.skip = parameter(np.ones(channel_dim, dtype=dtype))

    def a_bar(self):
        """Continuous-time diagonal transition, strictly negative."""
        return neg(exp(self.a_log))


@dataclass
class SelectiveParams:
    delta: Tensor  # [T, C], positive
    b: Tensor  # [T, S]
    c: Tensor  # [T, S]


@dataclass
class SsmState:
    h: np.ndarray  # [C, S]

    @classmethod
    def zeros(cls, channel_dim, state_dim, dtype=None):
        return cls(np.zeros((channel_dim, state_dim), dtype=dtype or get_default_dtype()))


def generate_selective_params(y, params):
    return SelectiveParams(
        # softplus underflows to 0 for very negative pre-activations; the
        # smallest normal number keeps delta strictly positive
        delta=softplus(params.delta_proj(y)) + float(np.finfo(y.dtype).tiny),
        b=params.b_proj(y),
        c=params.c_proj(y),
    )


def discretize(delta, a_bar, b_bar):
    """Zero-order-hold step for scalar (or elementwise array) arguments.

    Returns ``(w_h, w_y)``. The ``delta`` factors of the textbook form cancel,
    leaving ``w_y = (exp(delta*a) - 1) / a * b``; at ``a == 0`` the limit
    ``delta * b`` is used.
    """
    delta = np.asarray(delta, dtype=np.float64)
    a_bar = np.asarray(a_bar, dtype=np.float64)
    b_bar = np.asarray(b_bar, dtype=np.float64)
    x = delta * a_bar
    w_h = np.exp(x)
    zero = a_bar == 0
    safe_a = np.where(zero, 1.0, a_bar)
    w_y = np.where(zero, delta * b_bar, np.expm1(x) / safe_a * b_bar)
    if w_h.ndim == 0:
        return float(w_h), float(w_y)
    return w_h, w_y


# ---------------------------------------------------------------- kernels

@numba.njit(cache=True)
def _scan_forward(y, delta, A, B, Cm, D, h0, z, hT):
    T, C = y.shape
    S = A.shape[1]
    h = np.empty(S, dtype=np.float64)
    for c in range(C):
        for s in range(S):
            h[s] = h0[c, s]
        for t in range(T):
            d = delta[t, c]
            yt = y[t, c]
            acc = 0.0
            for s in range(S):
                a = A[c, s]
                x = d * a
                if a != 0.0:
                    q = math.expm1(x) / a
                else:
                    q = d
                h[s] = q * B[t, s] * yt + math.exp(x) * h[s]
                acc += Cm[t, s] * h[s]
            z[t, c] = acc + D[c] * yt
        for s in range(S):
            hT[c, s] = h[s]


@numba.njit(cache=True)
def _scan_backward(y, delta, A, B, Cm, D, h0, gz, ghT, gy, gdelta, gA, gB, gC, gD, gh0):
    T, C = y.shape
    S = A.shape[1]
    hs = np.empty((T + 1, S), dtype=np.float64)
    gh = np.empty(S, dtype=np.float64)
    for c in range(C):
        for s in range(S):
            hs[0, s] = h0[c, s]
        for t in range(T):
            d = delta[t, c]
            for s in range(S):
                a = A[c, s]
                x = d * a
                q = math.expm1(x) / a if a != 0.0 else d
                hs[t + 1, s] = q * B[t, s] * y[t, c] + math.exp(x) * hs[t, s]
        for s in range(S):
            gh[s] = ghT[c, s]
        gd_c = 0.0
        for t in range(T - 1, -1, -1):
            g = gz[t, c]
            d = delta[t, c]
            yt = y[t, c]
            gd_c += g * yt
            gy_t = D[c] * g
            gdelta_t = 0.0
            for s in range(S):
                a = A[c, s]
                x = d * a
                wh = math.exp(x)
                if a != 0.0:
                    em = math.expm1(x)
                    q = em / a
                    dq_da = (d * wh * a - em) / (a * a)
                else:
                    q = d
                    dq_da = 0.5 * d * d
                gC[t, s] += g * hs[t + 1, s]
                gh_s = gh[s] + Cm[t, s] * g
                b = B[t, s]
                g_wy = gh_s * yt
                g_wh = gh_s * hs[t, s]
                gy_t += gh_s * q * b
                gB[t, s] += g_wy * q
                gdelta_t += g_wh * a * wh + g_wy * b * wh
                gA[c, s] += g_wh * d * wh + g_wy * b * dq_da
                gh[s] = gh_s * wh
            gy[t, c] = gy_t
            gdelta[t, c] = gdelta_t
        gD[c] = gd_c
        for s in range(S):
            gh0[c, s] = gh[s]


@numba.njit(cache=True)
def _chunk_recurrence(em, inv_a, zero, delta, y, B, Cm, h, z):
    # em: [t, S, C]; inv_a, zero, h: [S, C]; channels innermost so the loop vectorises
    Tc, S, C = em.shape
    for t in range(Tc):
        for s in range(S):
            b = B[t, s]
            cs = Cm[t, s]
            for c in range(C):
                q = delta[t, c] if zero[s, c] else em[t, s, c] * inv_a[s, c]
                hn = q * b * y[t, c] + (em[t, s, c] + 1.0) * h[s, c]
                h[s, c] = hn
                z[t, c] += cs * hn


def _first_bad_timestep(z):
    bad = ~np.isfinite(z)
    return int(np.argmax(bad.any(axis=1)))


def _check(z, hT):
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(hT))):
        t = _first_bad_timestep(z) if not np.all(np.isfinite(z)) else z.shape[0] - 1
        raise NumericError(f"selective scan produced non-finite state at timestep {t}")


def _forward_sequential(y, delta, A, B, Cm, D, h0):
    z = np.empty_like(y)
    hT = np.empty_like(h0)
    _scan_forward(y, delta, A, B, Cm, D, h0, z, hT)
    return z, hT


def _forward_chunked(y, delta, A, B, Cm, D, h0, chunk):
    z = y * D
    At = np.ascontiguousarray(A.T)  # [S, C]
    h = np.ascontiguousarray(h0.T)
    zero = At == 0
    inv_a = 1 / np.where(zero, 1, At).astype(At.dtype)
    for start in range(0, y.shape[0], chunk):
        sl = slice(start, start + chunk)
        da = delta[sl, None, :] * At
        em = np.expm1(da, out=da)
        with instrument.scratch(em, z):
            _chunk_recurrence(em, inv_a, zero, delta[sl], y[sl], B[sl], Cm[sl], h, z[sl])
    return z, np.ascontiguousarray(h.T)


def _scan_op(y, sp, params, h0, chunk):
    A = params.a_bar()
    T, C = y.shape
    S = A.shape[1]
    if sp.delta.shape != (T, C) or sp.b.shape != (T, S) or sp.c.shape != (T, S):
        raise ValueError("selective parameters do not match the input sequence")
    if h0 is None:
        h0 = SsmState.zeros(C, S, y.dtype)
    h0d = np.ascontiguousarray(h0.h, dtype=y.dtype)
    args = (y.data, sp.delta.data, A.data, sp.b.data, sp.c.data, params.skip.data, h0d)
    if chunk is None:
        z, hT = _forward_sequential(*args)
    else:
        z, hT = _forward_chunked(*args, chunk)
    instrument.add_macs(3 * T * C * S)
    _check(z, hT)

    def adjoint(g):
        gy = np.empty_like(y.data)
        gdelta = np.empty_like(y.data)
        gA = np.zeros_like(A.data)
        gB = np.zeros_like(sp.b.data)
        gC = np.zeros_like(sp.c.data)
        gD = np.empty_like(params.skip.data)
        gh0 = np.empty_like(h0d)
        _scan_backward(*args, np.ascontiguousarray(g), np.zeros_like(h0d), gy, gdelta, gA, gB, gC, gD, gh0)
        return gy, gdelta, gA, gB, gC, gD

    out = make_result(z, (y, sp.delta, A, sp.b, sp.c, params.skip), adjoint)
    return out, SsmState(hT)


def selective_scan(y, sp, params, h0=None):
    """Sequential scan over ``y[T, C]``; returns ``(z, final_state)``. Differentiable."""
    return _scan_op(y, sp, params, h0, None)


def selective_scan_chunked(y, sp, params, h0=None, chunk=16):
    """Same result as :func:`selective_scan`, computed ``chunk`` steps at a time.

    Transition coefficients for a whole chunk are evaluated vectorised, so
    transient memory is ``chunk * C * S`` values regardless of ``T``.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be positive, got {chunk}")
    return _scan_op(y, sp, params, h0, int(chunk))
