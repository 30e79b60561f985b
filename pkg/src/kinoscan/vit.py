"""Minimal per-frame Vision Transformer hosting one temporal block insertion.

Every frame is tokenized and processed independently by pre-norm MSA/MLP
blocks; the temporal block (when enabled) is inserted exactly once, after a
configurable block index, and is the only place frames exchange information
besides the final temporal average pooling of per-frame CLS features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as kt
from .block import TemporalBlockParams, init_temporal_block_params, temporal_block_forward
from .motion_prior import MotionPriorConfig
from .scanner import ScannerConfig
from .tensor import ConfigError, Parameter, Tensor, check_unique_names


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    width: int = 64
    mlp_ratio: float = 4.0
    num_classes: int = 4
    insert_after: int = 2       # temporal block goes after this block (1-based)
    temporal_enabled: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide width {self.width}")
        if not (1 <= self.insert_after < self.depth):
            raise ConfigError(
                f"insert_after must lie in [1, depth-1], got {self.insert_after}")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def tokens(self) -> int:
        hp, wp = self.grid
        return hp * wp + 1


@dataclass
class BlockParams:
    ln1_g: Parameter
    ln1_b: Parameter
    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    wo: Parameter
    bo: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    def parameters(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
                self.w1, self.b1, self.w2, self.b2]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, c, mlp_ratio, prefix, dtype):
    hidden = int(c * mlp_ratio)
    mk = lambda name, value: Parameter(f"{prefix}.{name}", value, dtype=dtype)
    return BlockParams(
        ln1_g=mk("ln1.gamma", np.ones(c)), ln1_b=mk("ln1.beta", np.zeros(c)),
        wq=mk("attn.q.weight", _uniform(rng, (c, c), c)), bq=mk("attn.q.bias", np.zeros(c)),
        wk=mk("attn.k.weight", _uniform(rng, (c, c), c)), bk=mk("attn.k.bias", np.zeros(c)),
        wv=mk("attn.v.weight", _uniform(rng, (c, c), c)), bv=mk("attn.v.bias", np.zeros(c)),
        wo=mk("attn.out.weight", _uniform(rng, (c, c), c)), bo=mk("attn.out.bias", np.zeros(c)),
        ln2_g=mk("ln2.gamma", np.ones(c)), ln2_b=mk("ln2.beta", np.zeros(c)),
        w1=mk("mlp.fc1.weight", _uniform(rng, (c, hidden), c)), b1=mk("mlp.fc1.bias", np.zeros(hidden)),
        w2=mk("mlp.fc2.weight", _uniform(rng, (hidden, c), hidden)), b2=mk("mlp.fc2.bias", np.zeros(c)),
    )


def _linear(x2d: Tensor, w: Parameter, b: Parameter) -> Tensor:
    return kt.matmul(x2d, w) + b


def attention(z: Tensor, bp: BlockParams, heads: int) -> Tensor:
    """Pre-norm multi-head self-attention over the token axis of [M, n, C]."""
    m, n, c = z.shape
    dh = c // heads
    h = kt.layer_norm(z, bp.ln1_g, bp.ln1_b)
    flat = kt.reshape(h, (m * n, c))

    def split_heads(x2d):
        return kt.transpose(kt.reshape(x2d, (m, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(flat, bp.wq, bp.bq))
    k = split_heads(_linear(flat, bp.wk, bp.bk))
    v = split_heads(_linear(flat, bp.wv, bp.bv))

    scale = Tensor(np.asarray(1.0 / np.sqrt(dh), dtype=z.dtype))
    scores = kt.matmul(q, kt.transpose(k, (0, 1, 3, 2))) * scale
    weights = kt.softmax(scores, axis=-1)
    mixed = kt.matmul(weights, v)
    mixed = kt.reshape(kt.transpose(mixed, (0, 2, 1, 3)), (m * n, c))
    return kt.reshape(_linear(mixed, bp.wo, bp.bo), (m, n, c))


def mlp(z: Tensor, bp: BlockParams) -> Tensor:
    m, n, c = z.shape
    flat = kt.reshape(z, (m * n, c))
    h = kt.gelu(_linear(flat, bp.w1, bp.b1))
    return kt.reshape(_linear(h, bp.w2, bp.b2), (m, n, c))


def vit_block(z: Tensor, bp: BlockParams, heads: int) -> Tensor:
    """Pre-norm residual MSA then pre-norm residual MLP."""
    z = z + attention(z, bp, heads)
    h = kt.layer_norm(z, bp.ln2_g, bp.ln2_b)
    return z + mlp(h, bp)


class VideoModel:
    """Frame-wise ViT with one temporal block insertion and a linear head."""

    def __init__(self, cfg: VitConfig,
                 motion_cfg: MotionPriorConfig | None = None,
                 scanner_cfg: ScannerConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.motion_cfg = motion_cfg if motion_cfg is not None else MotionPriorConfig()
        self.scanner_cfg = scanner_cfg if scanner_cfg is not None else ScannerConfig()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c = cfg.width
        patch_dim = 3 * cfg.patch_size ** 2
        mk = lambda name, value: Parameter(name, value, dtype=dtype)

        self.patch_w = mk("embed.proj.weight", _uniform(rng, (patch_dim, c), patch_dim))
        self.patch_b = mk("embed.proj.bias", np.zeros(c))
        self.cls_token = mk("embed.cls", 0.02 * rng.standard_normal(c))
        self.pos = mk("embed.pos", 0.02 * rng.standard_normal((cfg.tokens, c)))
        self.blocks = [_init_block(rng, c, cfg.mlp_ratio, f"blocks.{i}", dtype)
                       for i in range(cfg.depth)]
        self.final_g = mk("final_ln.gamma", np.ones(c))
        self.final_b = mk("final_ln.beta", np.zeros(c))
        self.head_w = mk("head.weight", _uniform(rng, (c, cfg.num_classes), c))
        self.head_b = mk("head.bias", np.zeros(cfg.num_classes))

        self.temporal: TemporalBlockParams | None = None
        if cfg.temporal_enabled:
            self.temporal = init_temporal_block_params(
                rng, c, self.motion_cfg, self.scanner_cfg, dtype=dtype)
        check_unique_names(self.parameters())

    def parameters(self):
        ps = [self.patch_w, self.patch_b, self.cls_token, self.pos]
        for bp in self.blocks:
            ps.extend(bp.parameters())
        ps.extend([self.final_g, self.final_b, self.head_w, self.head_b])
        if self.temporal is not None:
            ps.extend(self.temporal.parameters())
        return ps

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    def patch_embed(self, frames: Tensor) -> Tensor:
        """[M,3,H,W] -> [M, N+1, C]: patchify, project, prepend CLS, add pos."""
        cfg = self.cfg
        m = frames.shape[0]
        if frames.shape[2] % cfg.patch_size or frames.shape[3] % cfg.patch_size:
            raise ConfigError(
                f"resolution {frames.shape[2]}x{frames.shape[3]} not divisible "
                f"by patch size {cfg.patch_size}")
        p = cfg.patch_size
        hp, wp = frames.shape[2] // p, frames.shape[3] // p
        x = kt.reshape(frames, (m, 3, hp, p, wp, p))
        x = kt.transpose(x, (0, 2, 4, 1, 3, 5))
        x = kt.reshape(x, (m * hp * wp, 3 * p * p))
        tok = kt.reshape(_linear(x, self.patch_w, self.patch_b), (m, hp * wp, -1))
        cls = kt.broadcast_to(kt.reshape(self.cls_token, (1, 1, cfg.width)),
                              (m, 1, cfg.width))
        return kt.concat([cls, tok], axis=1) + self.pos

    def forward_frames(self, frames: Tensor, b: int, t: int,
                       mode="sequential", workers=1) -> Tensor:
        """Backbone over [B*T,3,H,W] with the temporal insertion; returns tokens."""
        cfg = self.cfg
        z = self.patch_embed(frames)
        hp, wp = cfg.grid
        for i, bp in enumerate(self.blocks, start=1):
            z = vit_block(z, bp, cfg.heads)
            if i == cfg.insert_after and self.temporal is not None:
                z4 = kt.reshape(z, (b, t, cfg.tokens, cfg.width))
                z4 = temporal_block_forward(z4, self.temporal, self.motion_cfg,
                                            hp, wp, mode=mode, workers=workers)
                z = kt.reshape(z4, (b * t, cfg.tokens, cfg.width))
        return kt.layer_norm(z, self.final_g, self.final_b)

    def forward_video(self, x: Tensor, mode="sequential", workers=1) -> Tensor:
        """[B,T,3,H,W] -> logits [B, num_classes] via temporal average pooling."""
        b, t = x.shape[0], x.shape[1]
        frames = kt.reshape(x, (b * t, 3, x.shape[3], x.shape[4]))
        z = self.forward_frames(frames, b, t, mode=mode, workers=workers)
        cls = kt.narrow(z, 1, 0, 1)                      # [B*T, 1, C]
        v = kt.mean(kt.reshape(cls, (b, t, self.cfg.width)), axis=1)
        return _linear(v, self.head_w, self.head_b)
