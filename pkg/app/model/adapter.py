"""Shared adapter mapping intermediate patch tokens to a pseudo-class token."""

from __future__ import annotations

from typing import Dict

import numpy as np

from ..autodiff import ops
from ..autodiff.ops import RunningStats
from ..autodiff.tensor import Tensor
from ..config import ModelConfig
from .initializers import he_kernel, ones, param, zeros

ParamSet = Dict[str, Tensor]
StatsSet = Dict[str, RunningStats]

NORMS = ("bn1", "bn2")


def init_adapter(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    d = config.dim
    return {
        "conv1.weight": param(he_kernel(rng, (3, 3, d, d))),
        "bn1.gamma": ones(d),
        "bn1.beta": zeros(d),
        "conv2.weight": param(he_kernel(rng, (3, 3, d, d))),
        "bn2.gamma": ones(d),
        "bn2.beta": zeros(d),
    }


def init_adapter_stats(config: ModelConfig) -> StatsSet:
    return {norm: RunningStats.fresh(config.dim, config.bn_momentum) for norm in NORMS}


def adapt(params: ParamSet, stats: StatsSet, tokens: Tensor, training: bool, config: ModelConfig) -> Tensor:
    """``B x S x d`` tokens to ``B x d``; training mode updates ``stats``."""

    batch = tokens.shape[0]
    side = config.grid_side
    x = ops.reshape(tokens, (batch, side, side, config.dim))
    for index, norm in ((1, "bn1"), (2, "bn2")):
        x = ops.conv2d(x, params[f"conv{index}.weight"], None, stride=1, padding=1)
        x = ops.batch_norm(
            x, params[f"{norm}.gamma"], params[f"{norm}.beta"], stats[norm], training, config.bn_eps)
        x = ops.relu(x)
    return ops.global_avg_pool(x)


def adapter_parameter_count(config: ModelConfig) -> int:
    d = config.dim
    return 18 * d * d + 4 * d


def adapter_buffer_count(config: ModelConfig) -> int:
    return 4 * config.dim


__all__ = [
    "NORMS",
    "adapt",
    "adapter_buffer_count",
    "adapter_parameter_count",
    "init_adapter",
    "init_adapter_stats",
]
