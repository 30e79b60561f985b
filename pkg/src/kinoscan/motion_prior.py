"""Motion-prior encoder for patch-token video features.

Patch tokens [B, T, N, C] are viewed as per-frame spatial grids
[B, T, C, Hp, Wp] and enriched with two residual motion signals before
temporal scanning:

* correspondence scores: normalized inner products between a location's
  bottlenecked feature and features inside a local spatial window of nearby
  frames (evidence of where similar content moved);
* variation signals: per-location feature differences against nearby frames
  (evidence of what changed).

Both signals are projected back to the token width and added residually
through a zero-initialized output projection, so a freshly built encoder is
an exact identity.

Boundary policy: correspondence with a frame or spatial location outside the
clip scores 0 (no evidence for unobservable matches); variation against a
missing frame is 0 (no phantom motion at clip edges).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as kt
from .tensor import ConfigError, Parameter, ShapeError, Tensor, from_op


@dataclass
class MotionPriorConfig:
    context_frames: int = 4      # symmetric temporal neighborhood size, even
    window_radius: int = 4       # spatial search window is (2r+1) x (2r+1)
    bottleneck_dim: int | None = None  # correlation feature width, default C//4
    enable_corr: bool = True
    enable_var: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.context_frames < 0 or self.context_frames % 2 != 0:
            raise ConfigError(
                f"context_frames must be even and >= 0, got {self.context_frames}")
        if self.window_radius < 0:
            raise ConfigError("window_radius must be >= 0")

    @property
    def offsets(self) -> tuple[int, ...]:
        """Symmetric temporal offsets {-k/2..-1, +1..+k/2}."""
        half = self.context_frames // 2
        return tuple(range(-half, 0)) + tuple(range(1, half + 1))

    @property
    def window_side(self) -> int:
        return 2 * self.window_radius + 1


@dataclass
class MotionPriorParams:
    bottleneck_w: Parameter
    bottleneck_b: Parameter
    corr_proj: Parameter   # [n_tau * side^2, C], bias-free
    var_proj: Parameter    # [n_tau * C, C], bias-free
    out_proj: Parameter    # [C, C], bias-free, zero-initialized

    def parameters(self):
        return [self.bottleneck_w, self.bottleneck_b, self.corr_proj,
                self.var_proj, self.out_proj]


def init_motion_prior_params(rng, width, cfg: MotionPriorConfig,
                             prefix="motion_prior", dtype=np.float32):
    cr = cfg.bottleneck_dim if cfg.bottleneck_dim is not None else max(width // 4, 1)
    n_tau = len(cfg.offsets)
    corr_in = n_tau * cfg.window_side ** 2
    var_in = n_tau * width

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return rng.uniform(-bound, bound, size=shape)

    return MotionPriorParams(
        bottleneck_w=Parameter(f"{prefix}.bottleneck.weight",
                               uniform((width, cr), width), dtype=dtype),
        bottleneck_b=Parameter(f"{prefix}.bottleneck.bias",
                               np.zeros(cr), dtype=dtype),
        corr_proj=Parameter(f"{prefix}.corr_proj.weight",
                            uniform((corr_in, width), corr_in), dtype=dtype),
        var_proj=Parameter(f"{prefix}.var_proj.weight",
                           uniform((var_in, width), var_in), dtype=dtype),
        out_proj=Parameter(f"{prefix}.out_proj.weight",
                           np.zeros((width, width)), dtype=dtype),
    )


@dataclass
class CorrelationVolume:
    """Scores [B, T, n_tau, side^2, Hp, Wp] plus the offsets that index axis 2."""
    data: Tensor
    offsets: tuple[int, ...] = field(default_factory=tuple)
    window_radius: int = 0


# ---------------------------------------------------------------------------
# grid layout
# ---------------------------------------------------------------------------

def to_grid(patches: Tensor, hp: int, wp: int) -> Tensor:
    """[B,T,N,C] -> [B,T,C,Hp,Wp]; token n maps to (n // Wp, n % Wp)."""
    b, t, n, c = patches.shape
    if n != hp * wp:
        raise ShapeError(f"got {n} tokens for a {hp}x{wp} grid")
    g = kt.reshape(patches, (b, t, hp, wp, c))
    return kt.transpose(g, (0, 1, 4, 2, 3))


def from_grid(grid: Tensor) -> Tensor:
    """[B,T,C,Hp,Wp] -> [B,T,N,C], inverse of :func:`to_grid`."""
    b, t, c, hp, wp = grid.shape
    g = kt.transpose(grid, (0, 1, 3, 4, 2))
    return kt.reshape(g, (b, t, hp * wp, c))


def normalize_channels(grid: Tensor, eps: float) -> Tensor:
    """L2-normalize each location's channel vector; zero vectors stay zero."""
    return kt.l2_normalize(grid, axis=2, eps=eps)


# ---------------------------------------------------------------------------
# correspondence scores
# ---------------------------------------------------------------------------

def _window_slices(extent, shift):
    """Index ranges [lo, hi) such that both i and i+shift are in [0, extent)."""
    lo = max(0, -shift)
    hi = extent - max(0, shift)
    return lo, hi


def correlation_scores(grid: Tensor, cfg: MotionPriorConfig) -> CorrelationVolume:
    """Inner products against shifted features of nearby frames.

    ``grid`` must already be bottlenecked and channel-normalized. The volume
    entry [b, t, i_tau, (du+r)*side + (dv+r), i, j] holds
    <f[t](i,j), f[t+tau](i+du, j+dv)>, or 0 when any index leaves the clip.
    """
    offsets, r, side = cfg.offsets, cfg.window_radius, cfg.window_side
    b, t_len, _, hp, wp = grid.shape
    f = grid.data
    vol = np.zeros((b, t_len, len(offsets), side * side, hp, wp), dtype=f.dtype)

    pieces = []  # (tau, i_tau, i_delta, slices) for forward/backward reuse
    for i_tau, tau in enumerate(offsets):
        t_lo, t_hi = _window_slices(t_len, tau)
        if t_lo >= t_hi:
            continue
        for du in range(-r, r + 1):
            r_lo, r_hi = _window_slices(hp, du)
            if r_lo >= r_hi:
                continue
            for dv in range(-r, r + 1):
                c_lo, c_hi = _window_slices(wp, dv)
                if c_lo >= c_hi:
                    continue
                i_delta = (du + r) * side + (dv + r)
                src = np.s_[:, t_lo:t_hi, :, r_lo:r_hi, c_lo:c_hi]
                dst = np.s_[:, t_lo + tau:t_hi + tau, :,
                            r_lo + du:r_hi + du, c_lo + dv:c_hi + dv]
                out = np.s_[:, t_lo:t_hi, i_tau, i_delta, r_lo:r_hi, c_lo:c_hi]
                vol[out] = (f[src] * f[dst]).sum(axis=2)
                pieces.append((src, dst, out))

    def vjp(g):
        if not grid.requires_grad:
            return (None,)
        gf = np.zeros_like(f)
        for src, dst, out in pieces:
            gs = np.expand_dims(g[out], 2)
            gf[src] += gs * f[dst]
            gf[dst] += gs * f[src]
        return (gf,)

    return CorrelationVolume(from_op(vol, (grid,), vjp), offsets, r)


def project_correlation(vol: CorrelationVolume, params: MotionPriorParams) -> Tensor:
    """Project flattened scores to a residual grid [B,T,C,Hp,Wp]."""
    b, t, n_tau, d2, hp, wp = vol.data.shape
    flat_in = n_tau * d2
    if flat_in != params.corr_proj.shape[0]:
        raise ShapeError(
            f"volume supplies {flat_in} scores per location, corr_proj expects "
            f"{params.corr_proj.shape[0]}")
    x = kt.transpose(vol.data, (0, 1, 4, 5, 2, 3))
    x = kt.reshape(x, (b * t * hp * wp, flat_in))
    y = kt.gelu(kt.matmul(x, params.corr_proj))
    y = kt.reshape(y, (b, t, hp, wp, -1))
    return kt.transpose(y, (0, 1, 4, 2, 3))


# ---------------------------------------------------------------------------
# variation signals
# ---------------------------------------------------------------------------

def variation_signals(grid: Tensor, cfg: MotionPriorConfig) -> Tensor:
    """Per-location differences f[t+tau] - f[t] -> [B,T,n_tau,C,Hp,Wp].

    Rows whose t+tau falls outside the clip are exactly zero.
    """
    offsets = cfg.offsets
    b, t_len, c, hp, wp = grid.shape
    f = grid.data
    diffs = np.zeros((b, t_len, len(offsets), c, hp, wp), dtype=f.dtype)
    spans = []
    for i_tau, tau in enumerate(offsets):
        t_lo, t_hi = _window_slices(t_len, tau)
        if t_lo >= t_hi:
            continue
        diffs[:, t_lo:t_hi, i_tau] = f[:, t_lo + tau:t_hi + tau] - f[:, t_lo:t_hi]
        spans.append((i_tau, tau, t_lo, t_hi))

    def vjp(g):
        if not grid.requires_grad:
            return (None,)
        gf = np.zeros_like(f)
        for i_tau, tau, t_lo, t_hi in spans:
            gs = g[:, t_lo:t_hi, i_tau]
            gf[:, t_lo + tau:t_hi + tau] += gs
            gf[:, t_lo:t_hi] -= gs
        return (gf,)

    return from_op(diffs, (grid,), vjp)


def project_variation(diffs: Tensor, params: MotionPriorParams) -> Tensor:
    """Project concatenated per-offset differences to a residual grid."""
    b, t, n_tau, c, hp, wp = diffs.shape
    flat_in = n_tau * c
    if flat_in != params.var_proj.shape[0]:
        raise ShapeError(
            f"signals supply {flat_in} values per location, var_proj expects "
            f"{params.var_proj.shape[0]}")
    x = kt.transpose(diffs, (0, 1, 4, 5, 2, 3))
    x = kt.reshape(x, (b * t * hp * wp, flat_in))
    y = kt.gelu(kt.matmul(x, params.var_proj))
    y = kt.reshape(y, (b, t, hp, wp, -1))
    return kt.transpose(y, (0, 1, 4, 2, 3))


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------

def encode_motion_priors(patches: Tensor, params: MotionPriorParams,
                         cfg: MotionPriorConfig, hp: int, wp: int) -> Tensor:
    """Enrich patch tokens with motion evidence; shape-preserving.

    output = patches + out_proj(corr_residual + var_residual). With the
    zero-initialized out_proj the call is an exact identity; with
    context_frames == 0 or both signals disabled it returns the input
    untouched.
    """
    b, t, n, c = patches.shape
    if not cfg.offsets or not (cfg.enable_corr or cfg.enable_var):
        return patches

    grid = to_grid(patches, hp, wp)
    evidence = None

    if cfg.enable_corr:
        tok = kt.reshape(patches, (b * t * n, c))
        small = kt.matmul(tok, params.bottleneck_w) + params.bottleneck_b
        small = kt.reshape(small, (b, t, n, -1))
        small = normalize_channels(to_grid(small, hp, wp), cfg.norm_eps)
        vol = correlation_scores(small, cfg)
        evidence = project_correlation(vol, params)

    if cfg.enable_var:
        # differences are taken on the raw grid: a temporally constant clip
        # contributes nothing regardless of the correlation branch
        res_var = project_variation(variation_signals(grid, cfg), params)
        evidence = res_var if evidence is None else evidence + res_var

    ev_tok = kt.reshape(from_grid(evidence), (b * t * n, c))
    residual = kt.reshape(kt.matmul(ev_tok, params.out_proj), (b, t, n, c))
    return patches + residual
