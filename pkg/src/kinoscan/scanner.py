"""Selective state-space scanner over per-location temporal sequences.

Each of the L = B*N input rows is an independent length-T sequence of
C-dimensional tokens. The scanner normalizes, expands into content and gate
streams, mixes the content stream with a short causal depthwise convolution,
generates data-dependent step sizes and state read/write vectors from the
content itself, and runs a diagonal linear recurrence

    h_t = A_bar_t * h_{t-1} + Bx_t        (per (channel, state) lane)
    y_t = <C_t, h_t> + D * x_t

with A_bar_t = exp(Delta_t * A), A = -exp(A_log) < 0, Delta_t > 0 via a
softplus, so every A_bar lies in (0, 1) and the recurrence is stable by
construction.

Two executions of the same recurrence are provided: an exact left-to-right
loop and a work-efficient Blelloch prefix scan over the associative
composition of affine maps (a, b) -> (a2*a1, a2*b1 + b2). Both share one
hand-derived backward pass (the reverse-time adjoint recurrence), which is
independent of how the forward prefix was computed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as kt
from .tensor import ConfigError, NumericError, Parameter, Tensor, from_op


@dataclass
class ScannerConfig:
    state_dim: int = 16
    expand: int = 2
    conv_kernel: int = 4

    def inner(self, width: int) -> int:
        return self.expand * width


@dataclass
class ScannerParams:
    w_in: Parameter        # [C, 2*C_inner]
    b_in: Parameter        # [2*C_inner]
    conv_kernel: Parameter  # [C_inner, k]
    w_delta: Parameter     # [C_inner, C_inner]
    b_delta_proj: Parameter  # [C_inner] affine bias of the step projection
    b_delta: Parameter     # [C_inner] softplus offset
    w_b: Parameter         # [C_inner, d_s], bias-free
    w_c: Parameter         # [C_inner, d_s], bias-free
    a_log: Parameter       # [C_inner, d_s]
    d_skip: Parameter      # [C_inner]
    w_out: Parameter       # [C_inner, C], zero-initialized
    b_out: Parameter       # [C], zero-initialized

    def parameters(self):
        return [self.w_in, self.b_in, self.conv_kernel, self.w_delta,
                self.b_delta_proj, self.b_delta, self.w_b, self.w_c,
                self.a_log, self.d_skip, self.w_out, self.b_out]

    @property
    def inner(self) -> int:
        return self.conv_kernel.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]


def init_scanner_params(rng, width, cfg: ScannerConfig, prefix="scanner",
                        dtype=np.float32) -> ScannerParams:
    ci, ds, k = cfg.inner(width), cfg.state_dim, cfg.conv_kernel

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return rng.uniform(-bound, bound, size=shape)

    # -A spans 1..d_s logarithmically in every channel lane
    a_log = np.tile(np.linspace(0.0, np.log(ds), ds), (ci, 1))
    # softplus(b_delta) log-uniform in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=ci))
    b_delta = np.log(np.expm1(dt))

    return ScannerParams(
        w_in=Parameter(f"{prefix}.w_in.weight", uniform((width, 2 * ci), width), dtype=dtype),
        b_in=Parameter(f"{prefix}.w_in.bias", np.zeros(2 * ci), dtype=dtype),
        conv_kernel=Parameter(f"{prefix}.conv.kernel", uniform((ci, k), k), dtype=dtype),
        w_delta=Parameter(f"{prefix}.w_delta.weight", uniform((ci, ci), ci), dtype=dtype),
        b_delta_proj=Parameter(f"{prefix}.w_delta.bias", np.zeros(ci), dtype=dtype),
        b_delta=Parameter(f"{prefix}.b_delta", b_delta, dtype=dtype),
        w_b=Parameter(f"{prefix}.w_b.weight", uniform((ci, ds), ci), dtype=dtype),
        w_c=Parameter(f"{prefix}.w_c.weight", uniform((ci, ds), ci), dtype=dtype),
        a_log=Parameter(f"{prefix}.a_log", a_log, dtype=dtype),
        d_skip=Parameter(f"{prefix}.d_skip", np.ones(ci), dtype=dtype),
        w_out=Parameter(f"{prefix}.w_out.weight", np.zeros((ci, width)), dtype=dtype),
        b_out=Parameter(f"{prefix}.w_out.bias", np.zeros(width), dtype=dtype),
    )


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def input_project(u: Tensor, params: ScannerParams):
    """Normalize, expand, split into (content, gate); content comes first."""
    l, t, c = u.shape
    ci = params.inner
    ones = Tensor(np.ones(c, dtype=u.dtype))
    zeros = Tensor(np.zeros(c, dtype=u.dtype))
    h = kt.layer_norm(u, ones, zeros)
    h = kt.reshape(h, (l * t, c))
    h = kt.matmul(h, params.w_in) + params.b_in
    if h.shape[-1] != 2 * ci:
        raise ConfigError(
            f"w_in produces {h.shape[-1]} channels, expected {2 * ci}")
    h = kt.reshape(h, (l, t, 2 * ci))
    return kt.narrow(h, 2, 0, ci), kt.narrow(h, 2, ci, ci)


def temporal_mix(x_raw: Tensor, params: ScannerParams) -> Tensor:
    """Causal depthwise conv along T (zero left pad), then the smooth gate."""
    mixed = kt.depthwise_conv1d(x_raw, params.conv_kernel, causal=True, pad_mode="zero")
    return kt.smooth_gate_nl(mixed)


def dynamic_params(x: Tensor, params: ScannerParams):
    """Per-step projections: raw step size, write vector B, read vector C."""
    l, t, ci = x.shape
    flat = kt.reshape(x, (l * t, ci))
    delta_raw = kt.reshape(kt.matmul(flat, params.w_delta) + params.b_delta_proj,
                           (l, t, ci))
    b_seq = kt.reshape(kt.matmul(flat, params.w_b), (l, t, -1))
    c_seq = kt.reshape(kt.matmul(flat, params.w_c), (l, t, -1))
    return delta_raw, b_seq, c_seq


def discretize(delta_raw: Tensor, x: Tensor, b_seq: Tensor, params: ScannerParams):
    """Turn raw step sizes into transition/input terms of the recurrence.

    Delta = softplus(delta_raw + b_delta) > 0
    A_bar[l,t,c,s] = exp(Delta[l,t,c] * A[c,s])   in (0, 1)
    Bx[l,t,c,s]    = Delta[l,t,c] * B[l,t,s] * x[l,t,c]
    """
    l, t, ci = x.shape
    ds = params.state_dim
    delta = kt.softplus(delta_raw + params.b_delta)
    a = kt.neg(kt.exp(params.a_log))                       # [C_inner, d_s], < 0
    delta4 = kt.reshape(delta, (l, t, ci, 1))
    a_bar = kt.exp(delta4 * kt.reshape(a, (1, 1, ci, ds)))
    bx = delta4 * kt.reshape(b_seq, (l, t, 1, ds)) * kt.reshape(x, (l, t, ci, 1))
    return delta, a_bar, bx


# ---------------------------------------------------------------------------
# the scan itself
# ---------------------------------------------------------------------------

def _raise_first_nonfinite(h, mode):
    bad = np.argwhere(~np.isfinite(h))
    l, t, c, s = (int(v) for v in bad[0])
    raise NumericError(
        f"{mode} scan produced a non-finite state, first at (t={t}, c={c}, s={s}) "
        f"of sequence {l}")


def _scan_states_sequential(a_bar, bx):
    l, t_len, ci, ds = a_bar.shape
    h = np.zeros((l, t_len, ci, ds), dtype=a_bar.dtype)
    prev = np.zeros((l, ci, ds), dtype=a_bar.dtype)
    for t in range(t_len):
        prev = a_bar[:, t] * prev + bx[:, t]
        h[:, t] = prev
    if not np.isfinite(h).all():
        _raise_first_nonfinite(h, "sequential")
    return h


def _scan_states_parallel(a_bar, bx):
    """Blelloch two-pass scan over affine-map composition, padded to 2^k."""
    t_len = a_bar.shape[1]
    tp = 1 << max(t_len - 1, 0).bit_length()
    pad = tp - t_len
    if pad:
        shape = list(a_bar.shape)
        shape[1] = pad
        a = np.concatenate([a_bar, np.ones(shape, a_bar.dtype)], axis=1)
        b = np.concatenate([bx, np.zeros(shape, bx.dtype)], axis=1)
    else:
        a, b = a_bar.copy(), bx.copy()

    # up-sweep: tree reduction of (earlier, later) compositions
    d = 1
    while d < tp:
        hi = np.arange(2 * d - 1, tp, 2 * d)
        lo = hi - d
        a_hi = a[:, hi]
        b[:, hi] = a_hi * b[:, lo] + b[:, hi]
        a[:, hi] = a_hi * a[:, lo]
        d *= 2

    # down-sweep: distribute exclusive prefixes
    a[:, tp - 1] = 1.0
    b[:, tp - 1] = 0.0
    d = tp // 2
    while d >= 1:
        hi = np.arange(2 * d - 1, tp, 2 * d)
        lo = hi - d
        ta, tb = a[:, lo].copy(), b[:, lo].copy()
        a[:, lo] = a[:, hi]
        b[:, lo] = b[:, hi]
        b[:, hi] = ta * b[:, hi] + tb   # parent prefix composed before left total
        a[:, hi] = ta * a[:, hi]
        d //= 2

    # exclusive prefix value is b (h_0 = 0); apply each element for inclusive h
    h = a_bar * b[:, :t_len] + bx
    if not np.isfinite(h).all():
        _raise_first_nonfinite(h, "parallel")
    return h


def combine(earlier, later):
    """Compose two affine maps h -> a*h + b; ``later`` is applied second."""
    a1, b1 = earlier
    a2, b2 = later
    return a2 * a1, a2 * b1 + b2


def _chunked_over_l(fn, arrays, workers):
    l = arrays[0].shape[0]
    if workers <= 1 or l < 2 * workers:
        return fn(*arrays)
    bounds = np.linspace(0, l, workers + 1).astype(int)
    chunks = [tuple(arr[lo:hi] for arr in arrays)
              for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda args: fn(*args), chunks))
    return np.concatenate(parts, axis=0)


def scan(a_bar: Tensor, bx: Tensor, c_seq: Tensor, x: Tensor, d_skip: Parameter,
         mode="sequential", workers=1) -> Tensor:
    """Run the recurrence and read it out: y_t = <C_t, h_t> + D * x_t.

    ``mode`` selects the forward execution strategy only; the backward pass
    is always the reverse-time adjoint recurrence, so gradients are identical
    (bitwise) across modes given identical forward rounding, and equal to
    within scan-reassociation rounding otherwise.
    """
    if mode == "sequential":
        states = _chunked_over_l(_scan_states_sequential, (a_bar.data, bx.data), workers)
    elif mode == "parallel":
        states = _chunked_over_l(_scan_states_parallel, (a_bar.data, bx.data), workers)
    else:
        raise ConfigError(f"unknown scan mode {mode!r}")

    y = np.einsum("ltcs,lts->ltc", states, c_seq.data, optimize=True)
    y += x.data * d_skip.data

    def vjp(g):
        ga = gb = gc = gx = gd = None
        t_len = g.shape[1]
        # lambda_t = dL/dh_t accumulates the future through A_bar_{t+1}
        lam = g[:, t_len - 1, :, None] * c_seq.data[:, t_len - 1, None, :]
        if a_bar.requires_grad:
            ga = np.empty_like(a_bar.data)
        if bx.requires_grad:
            gb = np.empty_like(bx.data)
        if ga is not None or gb is not None:
            for t in range(t_len - 1, -1, -1):
                if t < t_len - 1:
                    lam = g[:, t, :, None] * c_seq.data[:, t, None, :] \
                        + a_bar.data[:, t + 1] * lam
                if ga is not None:
                    prev = states[:, t - 1] if t > 0 else 0.0
                    ga[:, t] = lam * prev
                if gb is not None:
                    gb[:, t] = lam
        if c_seq.requires_grad:
            gc = np.einsum("ltc,ltcs->lts", g, states, optimize=True)
        if x.requires_grad:
            gx = g * d_skip.data
        if d_skip.requires_grad:
            gd = (g * x.data).sum(axis=(0, 1))
        return ga, gb, gc, gx, gd

    return from_op(y, (a_bar, bx, c_seq, x, d_skip), vjp)


def output_gate(y: Tensor, g: Tensor, u: Tensor, params: ScannerParams,
                residual=True) -> Tensor:
    """Gated output projection; optionally adds the pre-scanner residual."""
    l, t, ci = y.shape
    gated = kt.reshape(y * kt.smooth_gate_nl(g), (l * t, ci))
    out = kt.matmul(gated, params.w_out) + params.b_out
    out = kt.reshape(out, (l, t, -1))
    return out + u if residual else out


def scanner_forward(u: Tensor, params: ScannerParams, mode="sequential",
                    residual=True, workers=1) -> Tensor:
    """Full scanner pipeline over [L, T, C] sequences; unidirectional.

    With ``residual=False`` the output is the scanner's contribution alone
    (exactly zero at initialization, where w_out == 0).
    """
    x_raw, gate = input_project(u, params)
    x = temporal_mix(x_raw, params)
    delta_raw, b_seq, c_seq = dynamic_params(x, params)
    _, a_bar, bx = discretize(delta_raw, x, b_seq, params)
    y = scan(a_bar, bx, c_seq, x, params.d_skip, mode=mode, workers=workers)
    return output_gate(y, gate, u, params, residual=residual)
