"""Client-side convolutional tokenizer producing patch tokens with positional embeddings."""

from __future__ import annotations

from typing import Dict, Tuple, Union

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import ShapeError, Tensor
from ..config import ModelConfig
from .initializers import he_kernel, param, trunc_normal, zeros

ParamSet = Dict[str, Tensor]


def token_shape(config: ModelConfig) -> Tuple[int, int]:
    """``(S, d)`` produced for one image under ``config``."""

    return config.tokens, config.dim


def init_tokenizer(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    k = config.conv_kernel
    c_in = config.image_shape[2]
    c1, c2 = config.conv_channels
    return {
        "conv1.weight": param(he_kernel(rng, (k, k, c_in, c1))),
        "conv1.bias": zeros(c1),
        "conv2.weight": param(he_kernel(rng, (k, k, c1, c2))),
        "conv2.bias": zeros(c2),
        "proj.weight": param(trunc_normal(rng, (c2, config.dim), config.init_std)),
        "proj.bias": zeros(config.dim),
        "pos_embed": param(trunc_normal(rng, (config.tokens, config.dim), config.init_std)),
    }


def tokenize(params: ParamSet, images: Union[np.ndarray, Tensor], config: ModelConfig) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = tuple(config.image_shape)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(
            "tokenize", x.shape, (-1,) + expected,
            detail=f"expected images of shape B x {'x'.join(map(str, expected))}")
    first, second = config.conv_strides
    pad = config.conv_padding
    x = ops.relu(ops.conv2d(x, params["conv1.weight"], params["conv1.bias"], first, pad))
    x = ops.relu(ops.conv2d(x, params["conv2.weight"], params["conv2.bias"], second, pad))
    batch = x.shape[0]
    x = ops.reshape(x, (batch, config.tokens, config.conv_channels[1]))
    x = ops.linear(x, params["proj.weight"], params["proj.bias"])
    return ops.add(x, params["pos_embed"])


def tokenizer_parameter_count(config: ModelConfig) -> int:
    k = config.conv_kernel
    c_in = config.image_shape[2]
    c1, c2 = config.conv_channels
    d, tokens = config.dim, config.tokens
    return k * k * c_in * c1 + c1 + k * k * c1 * c2 + c2 + c2 * d + d + tokens * d


__all__ = ["init_tokenizer", "token_shape", "tokenize", "tokenizer_parameter_count"]
