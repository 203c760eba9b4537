"""Client side of the split protocol: tokenizer, head and local data."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.optim import Adam
from ..autodiff.tensor import Graph, Tensor
from ..config import ModelConfig
from ..data.dataset import DomainDataset
from ..model.head import classify
from ..model.tokenizer import tokenize
from .messages import MessageKind, ProtocolError, ProtocolMessage, request_id_for
from .seeding import BatchCursor

LOGGER = logging.getLogger(__name__)

ParamSet = Dict[str, Tensor]

TOKENS = "tokens"
FEATURES = "features"
FEATURES_GRAD = "features_grad"
TOKENS_GRAD = "tokens_grad"


@dataclass(frozen=True)
class OptimizerSettings:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def build(self, params: ParamSet) -> Adam:
        return Adam(params, lr=self.lr, betas=self.betas, eps=self.eps, weight_decay=self.weight_decay)


@dataclass
class PendingRequest:
    request_id: str
    round_id: int
    labels: np.ndarray
    tokens: Tensor
    graph: Graph
    loss: Optional[float] = None


class FedClient:
    """Holds ``(tokenizer, head)`` and a local dataset; at most one request in flight."""

    def __init__(
            self,
            client_id: int,
            tokenizer: ParamSet,
            head: ParamSet,
            dataset: DomainDataset,
            batch_size: int,
            rng: np.random.Generator,
            model_config: ModelConfig,
            optimizer: OptimizerSettings) -> None:
        self.client_id = client_id
        self.tokenizer = tokenizer
        self.head = head
        self.dataset = dataset
        self.model_config = model_config
        self.cursor = BatchCursor(len(dataset), batch_size, rng)
        self.tokenizer_opt = optimizer.build(tokenizer)
        self.head_opt = optimizer.build(head)
        self._pending: Optional[PendingRequest] = None
        self._sequence = 0

    @property
    def num_samples(self) -> int:
        return len(self.dataset)

    @property
    def busy(self) -> bool:
        return self._pending is not None

    def next_batch(self) -> Tuple[np.ndarray, np.ndarray]:
        indices = self.cursor.next_indices()
        return self.dataset.images[indices], self.dataset.labels[indices]

    def forward(self, round_id: int, images: np.ndarray, labels: np.ndarray) -> ProtocolMessage:
        if self._pending is not None:
            raise ProtocolError(
                "client already has an outstanding request",
                round_id, self.client_id, self._pending.request_id)
        if len(images) != len(labels):
            raise ProtocolError(
                f"{len(images)} images but {len(labels)} labels", round_id, self.client_id)
        self._sequence += 1
        request_id = request_id_for(round_id, self.client_id, self._sequence)
        graph = Graph()
        with graph:
            tokens = tokenize(self.tokenizer, images, self.model_config)
        self._pending = PendingRequest(request_id, round_id, np.asarray(labels, dtype=np.int64), tokens, graph)
        return ProtocolMessage(
            MessageKind.TOKEN_BATCH, round_id, self.client_id, request_id, {TOKENS: tokens.data.copy()})

    def _expect(self, message: ProtocolMessage, kind: MessageKind) -> PendingRequest:
        pending = self._pending
        if message.kind is not kind:
            raise ProtocolError(
                f"expected {kind.value}, got {message.kind.value}",
                message.round_id, self.client_id, message.request_id)
        if pending is None or pending.request_id != message.request_id:
            raise ProtocolError(
                "no outstanding request matches this message",
                message.round_id, self.client_id, message.request_id)
        return pending

    def loss_and_backward(self, message: ProtocolMessage) -> ProtocolMessage:
        """Apply the head, step it, and return the gradient w.r.t. its input."""

        pending = self._expect(message, MessageKind.PSEUDO_CLASS_BATCH)
        features = Tensor(message.tensor(FEATURES), requires_grad=True)
        if features.shape[0] != len(pending.labels):
            raise ProtocolError(
                f"{features.shape[0]} feature rows for {len(pending.labels)} labels",
                message.round_id, self.client_id, message.request_id)
        with Graph() as graph:
            loss = ops.cross_entropy(classify(self.head, features), pending.labels)
        graph.backward(loss)
        self.head_opt.step()
        self.head_opt.zero_grad()
        pending.loss = float(loss.data)
        LOGGER.debug(
            "Client loss",
            extra={"round": message.round_id, "client": self.client_id, "loss": pending.loss})
        return ProtocolMessage(
            MessageKind.PSEUDO_CLASS_GRAD, message.round_id, self.client_id, message.request_id,
            {FEATURES_GRAD: features.grad})

    def backward(self, message: ProtocolMessage) -> float:
        """Finish the request: backpropagate through the tokenizer and step it."""

        pending = self._expect(message, MessageKind.TOKEN_GRAD)
        grad = message.tensor(TOKENS_GRAD)
        if grad.shape != pending.tokens.shape:
            raise ProtocolError(
                f"token gradient shape {grad.shape} != token shape {pending.tokens.shape}",
                message.round_id, self.client_id, message.request_id)
        pending.graph.backward_from(pending.tokens, grad)
        self.tokenizer_opt.step()
        self.tokenizer_opt.zero_grad()
        self._pending = None
        return float(pending.loss) if pending.loss is not None else float("nan")

    def upload(self, round_id: int) -> ProtocolMessage:
        payload = {f"tokenizer.{n}": t.data.copy() for n, t in self.tokenizer.items()}
        payload.update({f"head.{n}": t.data.copy() for n, t in self.head.items()})
        return ProtocolMessage(
            MessageKind.PARAM_UPLOAD, round_id, self.client_id, f"{round_id}-{self.client_id}-upload", payload)

    def apply_broadcast(self, message: ProtocolMessage, reset_moments: bool = False) -> None:
        if message.kind is not MessageKind.PARAM_BROADCAST:
            raise ProtocolError(
                f"expected {MessageKind.PARAM_BROADCAST.value}, got {message.kind.value}",
                message.round_id, self.client_id, message.request_id)
        for prefix, params in (("tokenizer", self.tokenizer), ("head", self.head)):
            for name, tensor in params.items():
                tensor.data = message.tensor(f"{prefix}.{name}").copy()
        if reset_moments:
            self.tokenizer_opt.reset_moments()
            self.head_opt.reset_moments()


__all__ = [
    "FEATURES",
    "FEATURES_GRAD",
    "FedClient",
    "OptimizerSettings",
    "PendingRequest",
    "TOKENS",
    "TOKENS_GRAD",
]
