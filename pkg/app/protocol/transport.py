"""In-process transport with byte accounting."""

from __future__ import annotations

import collections
import logging
from typing import Deque, Dict, List, Tuple

from .messages import MessageKind, ProtocolError, ProtocolMessage

LOGGER = logging.getLogger(__name__)


class Transport:
    """Ordered, lossless delivery that records every message's payload size."""

    def __init__(self) -> None:
        self._queue: Deque[ProtocolMessage] = collections.deque()
        self.log: List[Tuple[int, int, str, MessageKind, int]] = []
        self.bytes_by_kind: Dict[MessageKind, int] = collections.defaultdict(int)

    def send(self, message: ProtocolMessage) -> None:
        size = message.payload_bytes
        self.log.append((message.round_id, message.client_id, message.request_id, message.kind, size))
        self.bytes_by_kind[message.kind] += size
        self._queue.append(message)
        LOGGER.debug(
            "Message sent",
            extra={
                "kind": message.kind.value,
                "round": message.round_id,
                "client": message.client_id,
                "request": message.request_id,
                "bytes": size,
            })

    def receive(self) -> ProtocolMessage:
        if not self._queue:
            raise ProtocolError("receive on an empty transport")
        return self._queue.popleft()

    def deliver(self, message: ProtocolMessage) -> ProtocolMessage:
        """Send and immediately receive; the strict scheduler's hop."""

        self.send(message)
        return self.receive()

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_kind.values())

    def bytes_for(self, round_id: int, client_id: int, *kinds: MessageKind) -> int:
        return sum(
            size for r, c, _, kind, size in self.log
            if r == round_id and c == client_id and (not kinds or kind in kinds))

    def bytes_for_request(self, request_id: str, kind: MessageKind) -> int:
        return sum(size for _, _, rid, k, size in self.log if rid == request_id and k == kind)


__all__ = ["Transport"]
