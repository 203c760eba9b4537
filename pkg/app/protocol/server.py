"""Server side of the split protocol: encoder, adapter and block sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple

import numpy as np

from ..autodiff.ops import RunningStats
from ..autodiff.tensor import Graph, Tensor, zero_grads
from ..config import ModelConfig
from ..model.adapter import adapt
from ..model.encoder import block_of, encode_prefix
from ..model.tokenizer import token_shape
from ..model.sampler import BlockSampler
from .client import FEATURES, FEATURES_GRAD, TOKENS, TOKENS_GRAD, OptimizerSettings
from .messages import MessageKind, ProtocolError, ProtocolMessage

LOGGER = logging.getLogger(__name__)

ParamSet = Dict[str, Tensor]


@dataclass
class CachedForward:
    """Everything the matching backward needs; consumed exactly once."""

    round_id: int
    client_id: int
    block: int
    tokens: Tensor
    output: Tensor
    graph: Graph


class FedServer:
    """Serves forward and backward requests and aggregates encoder gradients per round.

    With ``cls_path`` set the adapter is bypassed and the depth-L cls token
    is returned instead of the pseudo-class token.
    """

    def __init__(
            self,
            encoder: ParamSet,
            adapter: ParamSet,
            adapter_stats: Dict[str, RunningStats],
            sampler: BlockSampler,
            model_config: ModelConfig,
            optimizer: OptimizerSettings,
            num_clients: int,
            cls_path: bool = False,
            encoder_divisor: str = "contributors") -> None:
        if encoder_divisor not in ("contributors", "clients"):
            raise ValueError(f"unknown encoder divisor '{encoder_divisor}'")
        self.encoder = encoder
        self.adapter = adapter
        self.adapter_stats = adapter_stats
        self.sampler = sampler
        self.model_config = model_config
        self.num_clients = num_clients
        self.cls_path = cls_path
        self.encoder_divisor = encoder_divisor
        self.encoder_opt = optimizer.build(encoder)
        self.adapter_opt = optimizer.build(adapter)
        self._cache: Dict[str, CachedForward] = {}
        # Per-round bookkeeping, cleared by end_round.
        self._seen: Set[str] = set()
        self._blocks: Dict[Tuple[int, int], int] = {}
        self._finished: Set[int] = set()
        self._accumulator: Dict[str, np.ndarray] = {}
        self.contributors: Dict[int, int] = {}
        self.round_id: Optional[int] = None
        self.last_closed: Optional[int] = None

    def block_for(self, round_id: int, client_id: int) -> int:
        """The depth used for ``client_id`` in ``round_id``, drawn on first use."""

        key = (round_id, client_id)
        if key not in self._blocks:
            self._blocks[key] = self.model_config.depth if self.cls_path else self.sampler.sample()
        return self._blocks[key]

    def has_cached(self, request_id: str) -> bool:
        return request_id in self._cache

    def forward(self, message: ProtocolMessage) -> ProtocolMessage:
        if message.kind is not MessageKind.TOKEN_BATCH:
            raise ProtocolError(
                f"server forward expects {MessageKind.TOKEN_BATCH.value}, got {message.kind.value}",
                message.round_id, message.client_id, message.request_id)
        if message.request_id in self._seen:
            raise ProtocolError(
                "duplicate request id", message.round_id, message.client_id, message.request_id)
        if self.round_id is not None and message.round_id != self.round_id:
            raise ProtocolError(
                f"request for round {message.round_id} while round {self.round_id} is open",
                message.round_id, message.client_id, message.request_id)
        if self.last_closed is not None and message.round_id <= self.last_closed:
            raise ProtocolError(
                f"request for round {message.round_id} after round {self.last_closed} closed",
                message.round_id, message.client_id, message.request_id)
        if not 0 <= message.client_id < self.num_clients:
            raise ProtocolError(
                f"unknown client for a federation of {self.num_clients}",
                message.round_id, message.client_id, message.request_id)
        batch = message.tensor(TOKENS)
        if batch.ndim != 3 or batch.shape[1:] != token_shape(self.model_config):
            raise ProtocolError(
                f"token batch of shape {batch.shape}, expected B x {token_shape(self.model_config)}",
                message.round_id, message.client_id, message.request_id)
        self.round_id = message.round_id
        self._seen.add(message.request_id)

        block = self.block_for(message.round_id, message.client_id)
        tokens = Tensor(batch, requires_grad=True)
        graph = Graph()
        with graph:
            if self.cls_path:
                _, output = encode_prefix(self.encoder, tokens, self.model_config.depth, self.model_config)
            else:
                patches, _ = encode_prefix(self.encoder, tokens, block, self.model_config)
                output = adapt(self.adapter, self.adapter_stats, patches, True, self.model_config)
        self._cache[message.request_id] = CachedForward(
            message.round_id, message.client_id, block, tokens, output, graph)
        LOGGER.debug(
            "Server forward",
            extra={"round": message.round_id, "client": message.client_id, "block": block})
        return ProtocolMessage(
            MessageKind.PSEUDO_CLASS_BATCH, message.round_id, message.client_id, message.request_id,
            {FEATURES: output.data.copy()})

    def backward(self, message: ProtocolMessage) -> ProtocolMessage:
        if message.kind is not MessageKind.PSEUDO_CLASS_GRAD:
            raise ProtocolError(
                f"server backward expects {MessageKind.PSEUDO_CLASS_GRAD.value}, got {message.kind.value}",
                message.round_id, message.client_id, message.request_id)
        entry = self._cache.pop(message.request_id, None)
        if entry is None:
            raise ProtocolError(
                "no cached forward for request", message.round_id, message.client_id, message.request_id)

        zero_grads(self.encoder.values())
        self.adapter_opt.zero_grad()
        entry.graph.backward_from(entry.output, message.tensor(FEATURES_GRAD))
        self.adapter_opt.step()
        self.adapter_opt.zero_grad()

        for name, tensor in self.encoder.items():
            if tensor.grad is None:
                continue
            if name in self._accumulator:
                self._accumulator[name] = self._accumulator[name] + tensor.grad
            else:
                self._accumulator[name] = tensor.grad.copy()
            tensor.grad = None
        for block in range(0, entry.block + 1):
            self.contributors[block] = self.contributors.get(block, 0) + 1
        self._finished.add(entry.client_id)

        return ProtocolMessage(
            MessageKind.TOKEN_GRAD, message.round_id, message.client_id, message.request_id,
            {TOKENS_GRAD: entry.tokens.grad})

    def end_round(self) -> Dict[int, int]:
        """Step the encoder with the round's averaged gradients; return contributor counts."""

        if self._cache:
            pending = sorted(self._cache)
            raise ProtocolError(
                f"end of round with {len(pending)} unfinished requests: {pending}", self.round_id)
        missing = sorted(set(range(self.num_clients)) - self._finished)
        if missing:
            raise ProtocolError(
                f"end of round before clients {missing} finished their backward", self.round_id)
        contributors = dict(self.contributors)
        for name, tensor in self.encoder.items():
            count = contributors.get(block_of(name), 0)
            if count == 0 or name not in self._accumulator:
                tensor.grad = None
                continue
            divisor = count if self.encoder_divisor == "contributors" else self.num_clients
            tensor.grad = self._accumulator[name] / divisor
        updated = self.encoder_opt.step()
        self.encoder_opt.zero_grad()
        LOGGER.debug(
            "Encoder update",
            extra={"round": self.round_id, "updated": updated, "contributors": contributors})
        self._accumulator = {}
        self.contributors = {}
        self._finished = set()
        self._seen = set()
        self._blocks = {}
        self.last_closed = self.round_id
        self.round_id = None
        return contributors


__all__ = ["CachedForward", "FedServer"]
