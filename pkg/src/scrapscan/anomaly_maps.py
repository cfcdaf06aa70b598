"""Class-probability maps from patch tokens and class embeddings.

Per stage: cosine similarity between each (normalized) projected patch token
and each class embedding, scaled by the learnable temperature and softmaxed
over classes. Stages fuse by cellwise mean so the result stays a probability
map; pixel-level binary scores are 1 - P(normal), bilinearly upsampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .prompts import PromptBank, class_embeddings, temperature
from .tensor import (
    Tensor,
    bilinear_upsample,
    clip,
    l2_normalize,
    linear,
    reshape,
    softmax,
    take_slice,
    transpose,
)


@dataclass
class AnomalyMaps:
    """All maps produced for one image or batch."""

    per_stage: list[Tensor] = field(default_factory=list)  # 4 x (..., g, g, K+1)
    fused_local: Tensor | None = None  # (..., g, g, K+1)
    multiscale: list[Tensor] = field(default_factory=list)  # 4 x (..., g, g, K+1)
    pixel_binary: np.ndarray | None = None  # (H, W) scores in [0, 1]


def stage_map(tokens: Tensor, bank: PromptBank) -> Tensor:
    """Per-cell class probabilities from cosine similarity with the bank.

    ``tokens`` is (..., g, g, proj_dim); the result is (..., g, g, K+1).
    Zero-norm tokens raise a numeric error naming the cell.
    """
    if tokens.data.shape[-1] != bank.embeddings.data.shape[-1]:
        raise ShapeError(
            f"token dim {tokens.data.shape} does not match bank dim {bank.embeddings.data.shape}"
        )
    normed = l2_normalize(tokens)
    embs = class_embeddings(bank)  # (K+1, p), unit rows
    cos = linear(normed, transpose(embs, (1, 0)))
    logits = cos * temperature(bank)
    return softmax(logits)


def fuse_stages(per_stage: list[Tensor]) -> Tensor:
    """Cellwise mean of the four stage probability maps (rows still sum to 1)."""
    if len(per_stage) != 4:
        raise ShapeError(f"expected 4 stage maps, got {len(per_stage)}")
    shape = per_stage[0].data.shape
    for m in per_stage[1:]:
        if m.data.shape != shape:
            raise ShapeError(f"stage map shapes differ: {shape} vs {m.data.shape}")
    total = per_stage[0] + per_stage[1]
    total = total + per_stage[2]
    total = total + per_stage[3]
    return total * 0.25


def to_pixel_binary(prob_map: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsampled anomaly score map: 1 - P(normal class) per cell, in [0, 1].

    Works for both the multiclass head and the two-row binary head, since in
    both cases channel 0 is the normal class.
    """
    d = prob_map.data
    if d.ndim < 3:
        raise ShapeError(f"expected (..., g, g, classes), got {d.shape}")
    p_normal = take_slice(prob_map, (Ellipsis, slice(0, 1)))
    score = 1.0 - p_normal
    up = bilinear_upsample(score, out_h, out_w)
    up = clip(up, 0.0, 1.0)
    return reshape(up, up.data.shape[:-1])
