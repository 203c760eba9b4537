"""Client linear head; class 0 is attack and class 1 bonafide."""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import ShapeError, Tensor
from ..config import ModelConfig
from .initializers import param, trunc_normal, zeros

ParamSet = Dict[str, Tensor]

NUM_CLASSES = 2
BONAFIDE = 1
ATTACK = 0


def init_head(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    return {
        "weight": param(trunc_normal(rng, (config.dim, NUM_CLASSES), config.init_std)),
        "bias": zeros(NUM_CLASSES),
    }


def classify(params: ParamSet, features: Tensor) -> Tensor:
    if features.data.ndim != 2 or features.shape[1] != params["weight"].shape[0]:
        raise ShapeError("classify", features.shape, params["weight"].shape)
    return ops.linear(features, params["weight"], params["bias"])


def bonafide_scores(logits: np.ndarray) -> np.ndarray:
    """``softmax(logits)[:, bonafide]`` computed stably."""

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp[:, BONAFIDE] / exp.sum(axis=1)


def head_parameter_count(config: ModelConfig) -> int:
    return config.dim * NUM_CLASSES + NUM_CLASSES


__all__ = [
    "ATTACK",
    "BONAFIDE",
    "NUM_CLASSES",
    "bonafide_scores",
    "classify",
    "head_parameter_count",
    "init_head",
]
