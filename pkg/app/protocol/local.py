"""Whole-model local training used by the fedavg and centralized baselines."""

from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Graph, Tensor
from ..data.dataset import DomainDataset
from ..model.adapter import adapt
from ..model.bundle import COMPONENTS, ModelBundle
from ..model.encoder import encode_prefix
from ..model.head import classify
from ..model.sampler import BlockSampler
from ..model.tokenizer import tokenize
from .client import OptimizerSettings
from .seeding import BatchCursor

LOGGER = logging.getLogger(__name__)


def forward_logits(
        bundle: ModelBundle,
        images: np.ndarray,
        block: Optional[int],
        training: bool) -> Tuple[Tensor, Tensor]:
    """Logits and pre-head features; ``block=None`` selects the depth-L cls path."""

    config = bundle.config
    tokens = tokenize(bundle.tokenizer, images, config)
    if block is None:
        _, features = encode_prefix(bundle.encoder, tokens, config.depth, config)
    else:
        patches, _ = encode_prefix(bundle.encoder, tokens, block, config)
        features = adapt(bundle.adapter, bundle.adapter_stats, patches, training, config)
    return classify(bundle.head, features), features


class LocalModel:
    """A full model trained by one monolithic graph per step.

    ``sampler=None`` trains the cls path; otherwise each step draws a block
    and trains the adapter path.
    """

    def __init__(
            self,
            client_id: int,
            bundle: ModelBundle,
            dataset: DomainDataset,
            batch_size: int,
            rng: np.random.Generator,
            optimizer: OptimizerSettings,
            sampler: Optional[BlockSampler] = None) -> None:
        self.client_id = client_id
        self.bundle = bundle
        self.dataset = dataset
        self.sampler = sampler
        self.cursor = BatchCursor(len(dataset), batch_size, rng)
        self.optimizers = {name: optimizer.build(bundle.component(name)) for name in COMPONENTS}

    @property
    def num_samples(self) -> int:
        return len(self.dataset)

    def train_step(self) -> Tuple[float, int]:
        indices = self.cursor.next_indices()
        images, labels = self.dataset.images[indices], self.dataset.labels[indices]
        block = self.sampler.sample() if self.sampler is not None else None
        with Graph() as graph:
            logits, _ = forward_logits(self.bundle, images, block, training=True)
            loss = ops.cross_entropy(logits, labels)
        graph.backward(loss)
        for optimizer in self.optimizers.values():
            optimizer.step()
            optimizer.zero_grad()
        depth = block if block is not None else self.bundle.config.depth
        LOGGER.debug(
            "Local step", extra={"client": self.client_id, "block": depth, "loss": float(loss.data)})
        return float(loss.data), depth

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.bundle.named_parameters()}

    def load(self, arrays: Dict[str, np.ndarray], reset_moments: bool = False) -> None:
        for name, tensor in self.bundle.named_parameters():
            tensor.data = arrays[name].copy()
        if reset_moments:
            for optimizer in self.optimizers.values():
                optimizer.reset_moments()


__all__ = ["LocalModel", "forward_logits"]
