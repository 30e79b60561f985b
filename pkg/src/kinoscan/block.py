"""Plug-in temporal block: motion priors + per-location scanning.

One insertion takes intermediate video tokens [B, T, N+1, C], splits off the
CLS token, enriches the patch tokens with motion priors, scans every spatial
location's temporal trajectory independently with a shared selective scanner,
and adds the scanned contribution back onto the *pre-encoder* patch tokens
(a single residual; the scanner runs in contribution-only mode here so that
a freshly initialized block is an exact identity on the patch stream). The
CLS token takes a separate lightweight route: a kernel-3 depthwise temporal
convolution initialized as a channel-partitioned shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as kt
from .motion_prior import (
    MotionPriorConfig,
    MotionPriorParams,
    encode_motion_priors,
    init_motion_prior_params,
)
from .scanner import ScannerConfig, ScannerParams, init_scanner_params, scanner_forward
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class TokenBatch:
    cls: Tensor       # [B, T, C]
    patches: Tensor   # [B, T, N, C]
    grid_dims: tuple[int, int]


def split_tokens(z: Tensor, hp: int, wp: int) -> TokenBatch:
    """Partition [B,T,N+1,C] into CLS (token 0) and patch tokens."""
    if z.ndim != 4 or z.shape[2] < 2:
        raise ShapeError(f"expected [B,T,N+1,C] with N >= 1, got {z.shape}")
    n = z.shape[2] - 1
    if n != hp * wp:
        raise ShapeError(f"{n} patch tokens do not fill a {hp}x{wp} grid")
    cls = kt.reshape(kt.narrow(z, 2, 0, 1), (z.shape[0], z.shape[1], z.shape[3]))
    patches = kt.narrow(z, 2, 1, n)
    return TokenBatch(cls=cls, patches=patches, grid_dims=(hp, wp))


def concat_tokens(cls: Tensor, patches: Tensor) -> Tensor:
    """Inverse of :func:`split_tokens`; CLS goes back to token index 0."""
    b, t, c = cls.shape
    return kt.concat([kt.reshape(cls, (b, t, 1, c)), patches], axis=2)


def make_trajectories(patches: Tensor) -> Tensor:
    """[B,T,N,C] -> [B*N,T,C]; trajectory l = b*N + n is location n of batch b."""
    b, t, n, c = patches.shape
    return kt.reshape(kt.transpose(patches, (0, 2, 1, 3)), (b * n, t, c))


def unmake_trajectories(traj: Tensor, b: int, n: int) -> Tensor:
    """Inverse permutation of :func:`make_trajectories`."""
    t, c = traj.shape[1], traj.shape[2]
    return kt.transpose(kt.reshape(traj, (b, n, t, c)), (0, 2, 1, 3))


def reassemble(scanned: Tensor, pre_encoder_patches: Tensor) -> Tensor:
    """Undo the trajectory permutation and add the pre-encoder residual."""
    b, t, n, c = pre_encoder_patches.shape
    if scanned.shape != (b * n, t, c):
        raise ShapeError(
            f"scanned trajectories {scanned.shape} do not match patches "
            f"{pre_encoder_patches.shape}")
    return unmake_trajectories(scanned, b, n) + pre_encoder_patches


def shift_style_cls_kernel(width: int, dtype=np.float32) -> np.ndarray:
    """Kernel-3 init: 1/4 channels read t-1, 1/4 read t+1, the rest pass through."""
    kern = np.zeros((width, 3), dtype=dtype)
    quarter = width // 4
    kern[:quarter, 0] = 1.0            # backward shift: y[t] = x[t-1]
    kern[quarter:2 * quarter, 2] = 1.0  # forward shift: y[t] = x[t+1]
    kern[2 * quarter:, 1] = 1.0         # identity
    return kern


def cls_temporal(cls: Tensor, kernel: Parameter) -> Tensor:
    """Depthwise temporal conv on the CLS stream (non-causal, zero pad)."""
    return kt.depthwise_conv1d(cls, kernel, causal=False, pad_mode="zero")


@dataclass
class TemporalBlockParams:
    motion: MotionPriorParams
    scanner: ScannerParams
    cls_kernel: Parameter

    def parameters(self):
        return (self.motion.parameters() + self.scanner.parameters()
                + [self.cls_kernel])


def init_temporal_block_params(rng, width, motion_cfg: MotionPriorConfig,
                               scanner_cfg: ScannerConfig, prefix="temporal",
                               dtype=np.float32) -> TemporalBlockParams:
    return TemporalBlockParams(
        motion=init_motion_prior_params(rng, width, motion_cfg,
                                        prefix=f"{prefix}.motion_prior", dtype=dtype),
        scanner=init_scanner_params(rng, width, scanner_cfg,
                                    prefix=f"{prefix}.scanner", dtype=dtype),
        cls_kernel=Parameter(f"{prefix}.cls_route.kernel",
                             shift_style_cls_kernel(width), dtype=dtype),
    )


def temporal_block_forward(z: Tensor, params: TemporalBlockParams,
                           motion_cfg: MotionPriorConfig, hp: int, wp: int,
                           mode="sequential", workers=1) -> Tensor:
    """Full insertion: split -> priors -> scan trajectories -> reassemble -> CLS route.

    Shape-preserving by construction; at initialization the patch stream is
    bitwise unchanged and the CLS stream equals its shifted initialization.
    """
    tokens = split_tokens(z, hp, wp)
    b, t, n, c = tokens.patches.shape

    enriched = encode_motion_priors(tokens.patches, params.motion, motion_cfg, hp, wp)
    scanned = scanner_forward(make_trajectories(enriched), params.scanner,
                              mode=mode, residual=False, workers=workers)
    patches_out = reassemble(scanned, tokens.patches)
    cls_out = cls_temporal(tokens.cls, params.cls_kernel)
    return concat_tokens(cls_out, patches_out)
