"""Toy multi-stage vision transformer with per-stage patch-token taps.

The encoder is trained from scratch at desk scale. Tokens are tapped after a
fixed set of blocks (four evenly spaced stages); each stage has its own
learned linear projection into the shared image/text embedding dimension that
the similarity heads consume. The CLS token is exposed but not consumed by
any loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    linear,
    multihead_attention,
    reshape,
    take_slice,
)

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 128
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    mlp_ratio: float = 2.0
    stage_taps: tuple[int, ...] = (2, 4, 6, 8)
    proj_dim: int = 32

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        taps = tuple(self.stage_taps)
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])) or taps[-1] != self.num_blocks:
            raise ConfigError(f"stage_taps must be 4 strictly increasing blocks ending at num_blocks, got {taps}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class StageFeatures:
    """Per-stage patch tokens plus the final CLS token for one image."""

    tokens: list[Tensor] = field(default_factory=list)  # 4 x (g, g, embed_dim)
    cls_token: Tensor | None = None  # (embed_dim,)
    projected: list[Tensor] = field(default_factory=list)  # 4 x (g, g, proj_dim)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Seeded Gaussian(0, 0.02) weights, zero biases, identity layer norms."""
    p: dict[str, Tensor] = {}

    def w(name: str, shape) -> None:
        p[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(name: str, shape) -> None:
        p[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape) -> None:
        p[name] = Tensor(np.ones(shape), requires_grad=True)

    e = cfg.embed_dim
    n_tokens = cfg.grid * cfg.grid + 1
    w("patch_embed.w", (3 * cfg.patch_size**2, e))
    zeros("patch_embed.b", (e,))
    w("pos_embed", (n_tokens, e))
    w("cls_token", (e,))
    for i in range(1, cfg.num_blocks + 1):
        ones(f"block{i}.ln1.gamma", (e,))
        zeros(f"block{i}.ln1.beta", (e,))
        w(f"block{i}.attn.wqkv", (e, 3 * e))
        zeros(f"block{i}.attn.bqkv", (3 * e,))
        w(f"block{i}.attn.wo", (e, e))
        zeros(f"block{i}.attn.bo", (e,))
        ones(f"block{i}.ln2.gamma", (e,))
        zeros(f"block{i}.ln2.beta", (e,))
        w(f"block{i}.mlp.w1", (e, cfg.mlp_dim))
        zeros(f"block{i}.mlp.b1", (cfg.mlp_dim,))
        w(f"block{i}.mlp.w2", (cfg.mlp_dim, e))
        zeros(f"block{i}.mlp.b2", (e,))
    for j in range(4):
        w(f"stage{j}.proj.w", (e, cfg.proj_dim))
        zeros(f"stage{j}.proj.b", (cfg.proj_dim,))
    return p


def patchify(image: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """Flatten an image into (g^2, 3*patch_size^2) rows in row-major patch order."""
    img = np.asarray(image, dtype=np.float64)
    s = cfg.image_size
    if img.shape != (s, s, 3):
        raise ShapeError(f"patchify: expected image of shape ({s}, {s}, 3), got {img.shape}")
    g, ps = cfg.grid, cfg.patch_size
    rows = img.reshape(g, ps, g, ps, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, 3 * ps * ps)
    return Tensor(np.ascontiguousarray(rows))


def unpatchify(rows: Tensor | np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Inverse of :func:`patchify` (round-trip exact)."""
    data = rows.data if isinstance(rows, Tensor) else np.asarray(rows)
    g, ps = cfg.grid, cfg.patch_size
    x = data.reshape(g, g, ps, ps, 3)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4).reshape(cfg.image_size, cfg.image_size, 3))


def encode_batch(images: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor]) -> tuple[list[Tensor], Tensor, list[Tensor]]:
    """Forward a batch of images; returns (stage tokens, cls tokens, projected).

    Shapes: stage tokens (B, g, g, embed_dim), cls (B, embed_dim), projected
    (B, g, g, proj_dim). Raises :class:`NumericError` naming the block index
    if activations go non-finite.
    """
    imgs = np.asarray(images, dtype=np.float64)
    s = cfg.image_size
    if imgs.ndim != 4 or imgs.shape[1:] != (s, s, 3):
        raise ShapeError(f"encode: expected images (B, {s}, {s}, 3), got {imgs.shape}")
    b = imgs.shape[0]
    g, ps = cfg.grid, cfg.patch_size
    patches = imgs.reshape(b, g, ps, g, ps, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, 3 * ps * ps)
    x = linear(Tensor(np.ascontiguousarray(patches)), params["patch_embed.w"], params["patch_embed.b"])

    e, heads = cfg.embed_dim, cfg.num_heads
    hd = e // heads
    cls = broadcast_to(reshape(params["cls_token"], (1, 1, e)), (b, 1, e))
    tokens = concat([cls, x], axis=1)
    tokens = tokens + params["pos_embed"]

    stage_tokens: list[Tensor] = []
    taps = set(cfg.stage_taps)
    for i in range(1, cfg.num_blocks + 1):
        pre = f"block{i}"
        h = layer_norm(tokens, params[f"{pre}.ln1.gamma"], params[f"{pre}.ln1.beta"])
        qkv = linear(h, params[f"{pre}.attn.wqkv"], params[f"{pre}.attn.bqkv"])
        att = multihead_attention(qkv, heads, 1.0 / math.sqrt(hd))
        tokens = tokens + linear(att, params[f"{pre}.attn.wo"], params[f"{pre}.attn.bo"])
        h2 = layer_norm(tokens, params[f"{pre}.ln2.gamma"], params[f"{pre}.ln2.beta"])
        m = linear(gelu(linear(h2, params[f"{pre}.mlp.w1"], params[f"{pre}.mlp.b1"])), params[f"{pre}.mlp.w2"], params[f"{pre}.mlp.b2"])
        tokens = tokens + m
        if not np.isfinite(tokens.data).all():
            raise NumericError(f"non-finite activations after block {i}")
        if i in taps:
            stage_tokens.append(reshape(take_slice(tokens, (slice(None), slice(1, None))), (b, g, g, e)))

    cls_out = take_slice(tokens, (slice(None), 0))
    projected = [
        linear(stage_tokens[j], params[f"stage{j}.proj.w"], params[f"stage{j}.proj.b"]) for j in range(4)
    ]
    return stage_tokens, cls_out, projected


def encode(image: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor]) -> StageFeatures:
    """Encode one image into :class:`StageFeatures`."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"encode: expected (H, W, 3) image, got {img.shape}")
    stages, cls_out, projected = encode_batch(img[None], cfg, params)
    g, e, pd = cfg.grid, cfg.embed_dim, cfg.proj_dim
    return StageFeatures(
        tokens=[reshape(t, (g, g, e)) for t in stages],
        cls_token=reshape(cls_out, (e,)),
        projected=[reshape(t, (g, g, pd)) for t in projected],
    )
