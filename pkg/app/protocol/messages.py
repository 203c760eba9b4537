"""Wire messages exchanged between clients and the server."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..autodiff.serialization import serialized_size


class MessageKind(str, enum.Enum):
    TOKEN_BATCH = "token_batch"
    PSEUDO_CLASS_BATCH = "pseudo_class_batch"
    PSEUDO_CLASS_GRAD = "pseudo_class_grad"
    TOKEN_GRAD = "token_grad"
    PARAM_BROADCAST = "param_broadcast"
    PARAM_UPLOAD = "param_upload"


# Parameter messages travel as FSIS archives; activations travel raw.
PARAM_KINDS = frozenset({MessageKind.PARAM_BROADCAST, MessageKind.PARAM_UPLOAD})


class ProtocolError(RuntimeError):
    """Raised on any violation of the client/server state machine."""

    def __init__(
            self,
            message: str,
            round_id: Optional[int] = None,
            client_id: Optional[int] = None,
            request_id: Optional[str] = None) -> None:
        context = []
        if round_id is not None:
            context.append(f"round={round_id}")
        if client_id is not None:
            context.append(f"client={client_id}")
        if request_id is not None:
            context.append(f"request={request_id}")
        super().__init__(f"{message} ({', '.join(context)})" if context else message)
        self.message = message
        self.round_id = round_id
        self.client_id = client_id
        self.request_id = request_id


def request_id_for(round_id: int, client_id: int, sequence: int) -> str:
    return f"{round_id}-{client_id}-{sequence}"


@dataclass(frozen=True)
class ProtocolMessage:
    """One message on the wire.

    Payloads hold floating-point arrays only, so integer label vectors
    cannot travel in any message kind.
    """

    kind: MessageKind
    round_id: int
    client_id: int
    request_id: str
    payload: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, array in self.payload.items():
            if not isinstance(array, np.ndarray) or not np.issubdtype(array.dtype, np.floating):
                raise ProtocolError(
                    f"payload entry '{name}' must be a floating-point array",
                    self.round_id, self.client_id, self.request_id)

    @property
    def payload_bytes(self) -> int:
        if self.kind in PARAM_KINDS:
            return serialized_size(self.payload)
        return sum(int(array.size) * array.dtype.itemsize for array in self.payload.values())

    def tensor(self, name: str) -> np.ndarray:
        try:
            return self.payload[name]
        except KeyError as exc:
            raise ProtocolError(
                f"{self.kind.value} message has no '{name}' payload",
                self.round_id, self.client_id, self.request_id) from exc


__all__ = ["MessageKind", "PARAM_KINDS", "ProtocolError", "ProtocolMessage", "request_id_for"]
