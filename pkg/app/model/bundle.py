"""The four FedSIS components packaged together, with counting and checkpoint helpers."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Tuple, Union

import numpy as np

from ..autodiff import serialization
from ..autodiff.ops import RunningStats
from ..autodiff.tensor import Tensor
from ..config import ModelConfig
from .adapter import NORMS, adapter_buffer_count, adapter_parameter_count, init_adapter, init_adapter_stats
from .encoder import encoder_parameter_count, init_encoder
from .head import head_parameter_count, init_head
from .tokenizer import init_tokenizer, tokenizer_parameter_count

LOGGER = logging.getLogger(__name__)

ParamSet = Dict[str, Tensor]

COMPONENTS = ("tokenizer", "encoder", "adapter", "head")


@dataclass
class ModelBundle:
    config: ModelConfig
    tokenizer: ParamSet
    encoder: ParamSet
    adapter: ParamSet
    adapter_stats: Dict[str, RunningStats]
    head: ParamSet

    def component(self, name: str) -> ParamSet:
        if name not in COMPONENTS:
            raise KeyError(f"Unknown component '{name}'")
        return getattr(self, name)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for component in COMPONENTS:
            for name, tensor in self.component(component).items():
                yield f"{component}.{name}", tensor

    def named_arrays(self, include_buffers: bool = True) -> Dict[str, np.ndarray]:
        arrays = {name: tensor.data for name, tensor in self.named_parameters()}
        if include_buffers:
            for norm in NORMS:
                stats = self.adapter_stats[norm]
                arrays[f"adapter.{norm}.running_mean"] = stats.mean
                arrays[f"adapter.{norm}.running_var"] = stats.var
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        expected = self.named_arrays()
        missing = sorted(set(expected) - set(arrays))
        unexpected = sorted(set(arrays) - set(expected))
        if missing or unexpected:
            raise serialization.CheckpointFormatError(
                f"Checkpoint does not match the model: missing={missing} unexpected={unexpected}")
        for name, array in arrays.items():
            if array.shape != expected[name].shape:
                raise serialization.CheckpointFormatError(
                    f"Shape mismatch for {name}: checkpoint {array.shape}, model {expected[name].shape}")
        for name, tensor in self.named_parameters():
            tensor.data = arrays[name].astype(tensor.data.dtype)
        for norm in NORMS:
            stats = self.adapter_stats[norm]
            stats.mean = arrays[f"adapter.{norm}.running_mean"].astype(stats.mean.dtype)
            stats.var = arrays[f"adapter.{norm}.running_var"].astype(stats.var.dtype)

    def parameter_counts(self) -> Dict[str, int]:
        counts = {component: sum(t.size for t in self.component(component).values()) for component in COMPONENTS}
        counts["adapter_buffers"] = sum(s.mean.size + s.var.size for s in self.adapter_stats.values())
        return counts

    def clone(self) -> "ModelBundle":
        return copy.deepcopy(self)

    def save(self, path: Union[str, Path]) -> Path:
        return serialization.save(path, self.named_arrays())

    @classmethod
    def load(cls, path: Union[str, Path], config: ModelConfig) -> "ModelBundle":
        bundle = init_bundle(config, np.random.default_rng(0))
        bundle.load_arrays(serialization.load(path))
        LOGGER.debug(
            "Restored bundle from %s", path,
            extra={"path": str(path), **bundle.parameter_counts()})
        return bundle


def init_bundle(config: ModelConfig, rng: np.random.Generator) -> ModelBundle:
    """Initialise every component from ``rng`` in a fixed order."""

    return ModelBundle(
        config=config,
        tokenizer=init_tokenizer(config, rng),
        encoder=init_encoder(config, rng),
        adapter=init_adapter(config, rng),
        adapter_stats=init_adapter_stats(config),
        head=init_head(config, rng),
    )


def expected_parameter_counts(config: ModelConfig) -> Dict[str, int]:
    """Closed-form parameter counts per component."""

    return {
        "tokenizer": tokenizer_parameter_count(config),
        "encoder": encoder_parameter_count(config),
        "adapter": adapter_parameter_count(config),
        "head": head_parameter_count(config),
        "adapter_buffers": adapter_buffer_count(config),
    }


def clone_params(params: ParamSet) -> ParamSet:
    return {name: Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad) for name, tensor in params.items()}


__all__ = [
    "COMPONENTS",
    "ModelBundle",
    "clone_params",
    "expected_parameter_counts",
    "init_bundle",
]
