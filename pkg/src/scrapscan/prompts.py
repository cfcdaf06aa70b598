"""Learnable class embeddings standing in for encoded text prompts.

One embedding per class (index 0 is the normal class) plus a learnable
temperature. Rows are L2-normalized inside the forward graph on every use,
so the raw parameters are free to drift in scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, concat, exp, l2_normalize, take_slice, tmean

INIT_STD = 0.02
INIT_TAU = 1.0 / 0.07


@dataclass
class PromptBank:
    class_names: tuple[str, ...]  # index 0 = normal class
    embeddings: Tensor  # (K+1, proj_dim), learnable
    log_tau: Tensor  # scalar, learnable; tau = exp(log_tau) > 0

    @property
    def n_classes(self) -> int:
        """Total number of classes including normal (K+1)."""
        return len(self.class_names)


def init_prompt_bank(class_names, proj_dim: int, rng: np.random.Generator) -> PromptBank:
    """Seeded Gaussian(0, 0.02) embeddings; temperature initialized to 1/0.07."""
    names = tuple(class_names)
    if len(names) < 2:
        raise ConfigError(f"need a normal class plus at least one anomaly class, got {names}")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate class names: {names}")
    emb = Tensor(rng.normal(0.0, INIT_STD, size=(len(names), proj_dim)), requires_grad=True)
    log_tau = Tensor(np.log(INIT_TAU), requires_grad=True)
    return PromptBank(class_names=names, embeddings=emb, log_tau=log_tau)


def bank_parameters(bank: PromptBank) -> dict[str, Tensor]:
    return {"prompt.embeddings": bank.embeddings, "prompt.log_tau": bank.log_tau}


def class_embeddings(bank: PromptBank) -> Tensor:
    """Unit-normalized embedding rows, differentiable w.r.t. the raw bank."""
    return l2_normalize(bank.embeddings)


def temperature(bank: PromptBank) -> Tensor:
    return exp(bank.log_tau)


def binary_embedding(bank: PromptBank) -> Tensor:
    """Two-row bank for test-time binary scoring.

    Row 0 is the normalized normal embedding; row 1 is the renormalized mean
    of the normalized anomaly embeddings. A near-zero mean (anomaly
    embeddings cancelling out) is a numeric error.
    """
    normed = class_embeddings(bank)
    normal = take_slice(normed, slice(0, 1))
    anomaly_mean = tmean(take_slice(normed, slice(1, None)), axis=0, keepdims=True)
    fused = l2_normalize(anomaly_mean, min_norm=1e-9)
    return concat([normal, fused], axis=0)
