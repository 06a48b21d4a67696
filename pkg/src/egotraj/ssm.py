"""Selective state-space (Mamba-style) block.

Canonical Mamba-1 layout: RMS pre-norm, input projection into an SSM branch
and a gate branch, causal depthwise convolution, input-dependent
discretization (delta via softplus, simplified Euler discretization of B),
a sequential selective scan, SiLU gating, output projection, and a residual
connection. The scan and the convolution are autodiff primitives with
hand-derived exact adjoints; everything else composes elementwise ops.

All operations accept arbitrary leading batch axes; time is axis -2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (DimensionError, Tensor, add, as_tensor, exp, matmul,
                       mul, neg, silu, slice_axis, softplus)


class ContractViolation(ValueError):
    """A runtime precondition of the scan was violated (e.g. delta <= 0)."""


# -- primitives ---------------------------------------------------------------

def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Per-timestep RMS normalization: x / sqrt(mean(x^2) + eps) * gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"rmsnorm gain shape {gain.shape} != ({d},)")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    out = x.data * inv * gain.data

    def _bwd(g):
        if gain.requires_grad:
            gain._accum((g * x.data * inv).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            # d/dx of x_i * g_i * r with r = (mean(x^2)+eps)^(-1/2)
            dot = (g * gain.data * x.data).sum(axis=-1, keepdims=True)
            x._accum(g * gain.data * inv - x.data * inv ** 3 * dot / d)

    return Tensor(out, _parents=(x, gain), _bwd=_bwd)


def causal_depthwise_conv1d(u, kernels, bias) -> Tensor:
    """Depthwise 1-d convolution over time with zero left-padding.

    y[t, c] = sum_j kernels[c, j] * u[t - k + 1 + j, c] + bias[c], u[<0] = 0,
    so output at time t never looks past t.
    """
    u, kernels, bias = as_tensor(u), as_tensor(kernels), as_tensor(bias)
    ch, k = kernels.shape
    if u.shape[-1] != ch or bias.shape != (ch,):
        raise DimensionError(f"conv channel mismatch: u {u.shape}, "
                             f"kernels {kernels.shape}, bias {bias.shape}")
    length = u.shape[-2]
    pad_shape = u.shape[:-2] + (k - 1, ch)
    padded = np.concatenate([np.zeros(pad_shape, dtype=u.data.dtype), u.data], axis=-2)
    out = np.zeros_like(u.data)
    for j in range(k):
        out += kernels.data[:, j] * padded[..., j:j + length, :]
    out += bias.data

    def _bwd(g):
        if bias.requires_grad:
            bias._accum(g.reshape(-1, ch).sum(axis=0))
        if kernels.requires_grad:
            dk = np.empty_like(kernels.data)
            for j in range(k):
                dk[:, j] = (g * padded[..., j:j + length, :]).reshape(-1, ch).sum(axis=0)
            kernels._accum(dk)
        if u.requires_grad:
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[..., j:j + length, :] += g * kernels.data[:, j]
            u._accum(dpad[..., k - 1:, :])

    return Tensor(out, _parents=(u, kernels, bias), _bwd=_bwd)


def _scan_forward(dt, B, C, u, A, D):
    """Raw sequential recurrence; returns (y, h-history, decay-history)."""
    length = u.shape[-2]
    d_inner = u.shape[-1]
    d_state = A.shape[1]
    decay = np.exp(dt[..., :, None] * A)                       # (...,L,d,n)
    drive = (dt * u)[..., :, None] * B[..., None, :]           # (...,L,d,n)
    hs = np.empty(u.shape[:-2] + (length, d_inner, d_state), dtype=u.dtype)
    h = np.zeros(u.shape[:-2] + (d_inner, d_state), dtype=u.dtype)
    for t in range(length):
        h = decay[..., t, :, :] * h + drive[..., t, :, :]
        hs[..., t, :, :] = h
    y = (hs * C[..., :, None, :]).sum(axis=-1) + D * u
    return y, hs, decay


def selective_scan(delta, B, C, u, A, D_skip) -> Tensor:
    """Input-dependent discretized SSM scan.

    Per channel c and state s:
        Abar[t] = exp(delta[t,c] * A[c,s])
        h[t]    = Abar[t] * h[t-1] + delta[t,c] * B[t,s] * u[t,c]
        y[t,c]  = sum_s C[t,s] * h[t] + D_skip[c] * u[t,c]

    delta/u are (..., L, d_inner), B/C are (..., L, d_state), A is
    (d_inner, d_state), D_skip is (d_inner,). Backward is exact for every
    input including A.
    """
    delta, B, C = as_tensor(delta), as_tensor(B), as_tensor(C)
    u, A, D_skip = as_tensor(u), as_tensor(A), as_tensor(D_skip)
    d_inner, d_state = A.shape
    if delta.shape != u.shape or u.shape[-1] != d_inner:
        raise DimensionError(f"scan shape mismatch: delta {delta.shape}, u {u.shape}, A {A.shape}")
    if B.shape != C.shape or B.shape[-1] != d_state or B.shape[:-1] != u.shape[:-1]:
        raise DimensionError(f"scan shape mismatch: B {B.shape}, C {C.shape}, u {u.shape}")
    if np.any(delta.data <= 0):
        raise ContractViolation("selective_scan requires delta > 0 everywhere")

    y, hs, decay = _scan_forward(delta.data, B.data, C.data, u.data, A.data, D_skip.data)
    dt, Bd, Cd, ud, Ad, Dd = delta.data, B.data, C.data, u.data, A.data, D_skip.data
    length = ud.shape[-2]

    def _bwd(g):
        lead = tuple(range(g.ndim - 2))  # batch axes to reduce for A/D grads
        dA = np.zeros_like(Ad)
        ddt = np.zeros_like(dt)
        dB = np.zeros_like(Bd)
        dC = np.zeros_like(Cd)
        du = g * Dd
        carry = np.zeros_like(hs[..., 0, :, :])
        for t in range(length - 1, -1, -1):
            gt = g[..., t, :]                                   # (...,d)
            dh = gt[..., :, None] * Cd[..., t, None, :] + carry  # (...,d,n)
            hprev = hs[..., t - 1, :, :] if t > 0 else 0.0
            ddecay = dh * hprev                                 # adjoint of Abar
            dec_t = decay[..., t, :, :]
            dA += (ddecay * dec_t * dt[..., t, :, None]).sum(axis=lead)
            ddt[..., t, :] = ((ddecay * dec_t * Ad).sum(axis=-1)
                              + (dh * Bd[..., t, None, :]).sum(axis=-1) * ud[..., t, :])
            dB[..., t, :] = (dh * (dt * ud)[..., t, :, None]).sum(axis=-2)
            dC[..., t, :] = (gt[..., :, None] * hs[..., t, :, :]).sum(axis=-2)
            du[..., t, :] += (dh * Bd[..., t, None, :]).sum(axis=-1) * dt[..., t, :]
            carry = dec_t * dh
        if delta.requires_grad:
            delta._accum(ddt)
        if B.requires_grad:
            B._accum(dB)
        if C.requires_grad:
            C._accum(dC)
        if u.requires_grad:
            u._accum(du)
        if A.requires_grad:
            A._accum(dA)
        if D_skip.requires_grad:
            D_skip._accum((g * ud).reshape(-1, d_inner).sum(axis=0))

    return Tensor(y, _parents=(delta, B, C, u, A, D_skip), _bwd=_bwd)


def selective_scan_assoc(dt: np.ndarray, B: np.ndarray, C: np.ndarray,
                         u: np.ndarray, A: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Forward-only associative (doubling) formulation of the same scan.

    The recurrence h_t = a_t * h_{t-1} + b_t is a composition of affine maps,
    scanned here with log2(L) vectorized rounds. Optimization path only; must
    match the sequential reference to 1e-8.
    """
    length = u.shape[-2]
    a = np.exp(dt[..., :, None] * A)
    b = (dt * u)[..., :, None] * B[..., None, :]
    a = np.array(a)
    b = np.array(b)
    step = 1
    while step < length:
        a_prev = a[..., :-step, :, :]
        b_prev = b[..., :-step, :, :]
        b[..., step:, :, :] = b[..., step:, :, :] + a[..., step:, :, :] * b_prev
        a[..., step:, :, :] = a[..., step:, :, :] * a_prev
        step *= 2
    return (b * C[..., :, None, :]).sum(axis=-1) + D * u


def scan_kernel(dt, B, C, u, A, D) -> np.ndarray:
    """Forward-only sequential scan on raw arrays (bench path, any dtype)."""
    y, _, _ = _scan_forward(dt, B, C, u, A, D)
    return y


# -- block --------------------------------------------------------------------

@dataclass
class MambaBlockParams:
    """Learnable weights of one block. A = -exp(a_log) keeps decays in (0,1)."""

    w_in: Tensor      # (d_model, 2*d_inner): SSM branch then gate branch
    conv_w: Tensor    # (d_inner, k)
    conv_b: Tensor    # (d_inner,)
    w_delta: Tensor   # (d_inner, d_inner)
    delta_b: Tensor   # (d_inner,)
    w_b: Tensor       # (d_inner, d_state)
    w_c: Tensor       # (d_inner, d_state)
    a_log: Tensor     # (d_inner, d_state)
    d_skip: Tensor    # (d_inner,)
    w_out: Tensor     # (d_inner, d_model)
    norm_g: Tensor    # (d_model,)

    @property
    def d_inner(self) -> int:
        return self.conv_w.shape[0]

    def tensors(self):
        for name in ("w_in", "conv_w", "conv_b", "w_delta", "delta_b", "w_b",
                     "w_c", "a_log", "d_skip", "w_out", "norm_g"):
            yield name, getattr(self, name)


def init_mamba_block(rng: np.random.Generator, d_model: int, d_state: int = 16,
                     expand: int = 2, conv_width: int = 4) -> MambaBlockParams:
    d_inner = expand * d_model

    def uni(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    # softplus(delta_b) starts in [1e-3, 1e-1], uniform in log space
    dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
    delta_b = dt0 + np.log(-np.expm1(-dt0))  # inverse softplus
    # A = -exp(a_log) with a_log = log(1..d_state) per channel
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    return MambaBlockParams(
        w_in=uni(d_model, d_model, 2 * d_inner),
        conv_w=uni(conv_width, d_inner, conv_width),
        conv_b=Tensor(np.zeros(d_inner), requires_grad=True),
        w_delta=uni(d_inner, d_inner, d_inner),
        delta_b=Tensor(delta_b, requires_grad=True),
        w_b=uni(d_inner, d_inner, d_state),
        w_c=uni(d_inner, d_inner, d_state),
        a_log=Tensor(a_log, requires_grad=True),
        d_skip=Tensor(np.ones(d_inner), requires_grad=True),
        w_out=uni(d_inner, d_inner, d_model),
        norm_g=Tensor(np.ones(d_model), requires_grad=True),
    )


def mamba_block_forward(x, p: MambaBlockParams, check_decay: bool = False) -> Tensor:
    """Residual block: x + W_out(scan(silu(conv(x-branch))) * silu(gate))."""
    x = as_tensor(x)
    d_inner = p.d_inner
    xn = rmsnorm(x, p.norm_g)
    xz = matmul(xn, p.w_in)
    x_branch = slice_axis(xz, -1, 0, d_inner)
    gate = slice_axis(xz, -1, d_inner, 2 * d_inner)
    u = silu(causal_depthwise_conv1d(x_branch, p.conv_w, p.conv_b))
    delta = softplus(add(matmul(u, p.w_delta), p.delta_b))
    a_mat = neg(exp(p.a_log))
    if check_decay:
        decay = np.exp(delta.data[..., :, None] * a_mat.data)
        assert np.all((decay > 0) & (decay < 1)), "SSM decay left (0,1)"
    y = selective_scan(delta, matmul(u, p.w_b), matmul(u, p.w_c), u, a_mat, p.d_skip)
    return add(x, matmul(mul(y, silu(gate)), p.w_out))


def mamba_stack_forward(x, blocks: list[MambaBlockParams]) -> Tensor:
    out = as_tensor(x)
    for p in blocks:
        out = mamba_block_forward(out, p)
    return out
