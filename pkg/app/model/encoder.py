"""Server-side transformer encoder with prefix evaluation.

Parameter names are ``cls_token`` and ``blocks.<i>.<part>`` with blocks
numbered from 1. The cls token is treated as part of block 0 when gradients
are aggregated per block.
"""

from __future__ import annotations

import re
from typing import Dict, List, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import ShapeError, Tensor
from ..config import ModelConfig
from .initializers import ones, param, trunc_normal, zeros

ParamSet = Dict[str, Tensor]

_BLOCK_NAME = re.compile(r"^blocks\.(\d+)\.")


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    d = config.dim
    hidden = d * config.mlp_ratio
    std = config.init_std
    params: ParamSet = {"cls_token": param(trunc_normal(rng, (1, 1, d), std))}
    for block in range(1, config.depth + 1):
        prefix = f"blocks.{block}."
        params[prefix + "ln1.gamma"] = ones(d)
        params[prefix + "ln1.beta"] = zeros(d)
        for proj in ("q", "k", "v", "o"):
            params[prefix + f"attn.w{proj}"] = param(trunc_normal(rng, (d, d), std))
            params[prefix + f"attn.b{proj}"] = zeros(d)
        params[prefix + "ln2.gamma"] = ones(d)
        params[prefix + "ln2.beta"] = zeros(d)
        params[prefix + "mlp.fc1.weight"] = param(trunc_normal(rng, (d, hidden), std))
        params[prefix + "mlp.fc1.bias"] = zeros(hidden)
        params[prefix + "mlp.fc2.weight"] = param(trunc_normal(rng, (hidden, d), std))
        params[prefix + "mlp.fc2.bias"] = zeros(d)
    return params


def block_of(name: str) -> int:
    """Block index owning parameter ``name``; the cls token belongs to block 0."""

    match = _BLOCK_NAME.match(name)
    return int(match.group(1)) if match else 0


def block_parameter_names(params: ParamSet, block: int) -> List[str]:
    return [name for name in params if block_of(name) == block]


def embed(params: ParamSet, tokens: Tensor) -> Tensor:
    """Prepend the cls token, giving ``B x (S+1) x d``."""

    batch, _, width = tokens.shape
    cls = ops.broadcast_to(params["cls_token"], (batch, 1, width))
    return ops.concat([cls, tokens], axis=1)


def apply_block(params: ParamSet, block: int, x: Tensor, config: ModelConfig) -> Tensor:
    prefix = f"blocks.{block}."
    attn = {key: params[prefix + "attn." + key] for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    h = ops.layer_norm(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"], config.ln_eps)
    x = ops.add(x, ops.multi_head_attention(h, attn, config.heads))
    h = ops.layer_norm(x, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"], config.ln_eps)
    h = ops.gelu(ops.linear(h, params[prefix + "mlp.fc1.weight"], params[prefix + "mlp.fc1.bias"]))
    h = ops.linear(h, params[prefix + "mlp.fc2.weight"], params[prefix + "mlp.fc2.bias"])
    return ops.add(x, h)


def encode_sequence(params: ParamSet, tokens: Tensor, depth: int, config: ModelConfig) -> Tensor:
    """Full ``B x (S+1) x d`` stream after ``depth`` blocks."""

    if not 1 <= depth <= config.depth:
        raise ValueError(f"block index {depth} outside [1, {config.depth}]")
    if tokens.data.ndim != 3 or tokens.shape[1:] != (config.tokens, config.dim):
        raise ShapeError("encode_prefix", tokens.shape, (-1, config.tokens, config.dim))
    x = embed(params, tokens)
    for block in range(1, depth + 1):
        x = apply_block(params, block, x, config)
    return x


def split_stream(x: Tensor) -> Tuple[Tensor, Tensor]:
    """Separate ``B x (S+1) x d`` into patch tokens and the ``B x d`` cls token."""

    batch, length, width = x.shape
    patches = ops.slice_axis(x, 1, length, axis=1)
    cls = ops.reshape(ops.slice_axis(x, 0, 1, axis=1), (batch, width))
    return patches, cls


def encode_prefix(params: ParamSet, tokens: Tensor, depth: int, config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Run the first ``depth`` blocks; return intermediate patch tokens and the cls token."""

    return split_stream(encode_sequence(params, tokens, depth, config))


def encoder_parameter_count(config: ModelConfig) -> int:
    d = config.dim
    hidden = d * config.mlp_ratio
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + d * hidden + hidden + hidden * d + d
    return d + config.depth * per_block


__all__ = [
    "apply_block",
    "block_of",
    "block_parameter_names",
    "embed",
    "encode_prefix",
    "encode_sequence",
    "encoder_parameter_count",
    "init_encoder",
    "split_stream",
]
