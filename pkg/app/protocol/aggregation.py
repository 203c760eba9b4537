"""FedAvg weights, parameter averaging and the unifying round."""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .messages import MessageKind, ProtocolMessage
from .transport import Transport

LOGGER = logging.getLogger(__name__)

RHO_TOLERANCE = 1e-12


def rho_weights(sizes: Sequence[int], policy: str = "samples") -> np.ndarray:
    """``N_k / N`` for the ``samples`` policy, ``1 / K`` for ``uniform``."""

    counts = np.asarray(sizes, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError(f"client sizes must be positive, got {list(sizes)}")
    if policy == "samples":
        weights = counts / counts.sum()
    elif policy == "uniform":
        weights = np.full(counts.size, 1.0 / counts.size)
    else:
        raise ValueError(f"unknown rho policy '{policy}'")
    check_weights(weights)
    return weights


def check_weights(weights: Sequence[float]) -> None:
    total = float(np.sum(weights))
    if abs(total - 1.0) > RHO_TOLERANCE:
        raise ValueError(f"aggregation weights sum to {total!r}, expected 1 within {RHO_TOLERANCE}")
    if np.any(np.asarray(weights) < 0):
        raise ValueError("aggregation weights must be non-negative")


def fedavg(param_sets: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float]) -> Dict[str, np.ndarray]:
    """Weighted mean ``sum_k w_k * params_k``, accumulated in client order."""

    if len(param_sets) != len(weights):
        raise ValueError(f"{len(param_sets)} parameter sets for {len(weights)} weights")
    check_weights(weights)
    names = list(param_sets[0])
    for index, params in enumerate(param_sets[1:], start=1):
        if list(params) != names:
            raise ValueError(f"parameter set {index} does not match set 0")
    averaged: Dict[str, np.ndarray] = {}
    for name in names:
        total = weights[0] * param_sets[0][name]
        for weight, params in zip(weights[1:], param_sets[1:]):
            total = total + weight * params[name]
        averaged[name] = total
    return averaged


def unify(clients: Sequence, weights: Sequence[float], transport: Transport, round_id: int,
          reset_moments: bool = False) -> List[int]:
    """Average every client's tokenizer and head and broadcast the result.

    Returns the upload plus broadcast bytes per client.
    """

    uploads = [transport.deliver(client.upload(round_id)) for client in clients]
    averaged = fedavg([message.payload for message in uploads], weights)
    per_client = []
    for client, upload in zip(clients, uploads):
        broadcast = transport.deliver(ProtocolMessage(
            MessageKind.PARAM_BROADCAST, round_id, client.client_id,
            f"{round_id}-{client.client_id}-broadcast", {k: v.copy() for k, v in averaged.items()}))
        client.apply_broadcast(broadcast, reset_moments)
        per_client.append(upload.payload_bytes + broadcast.payload_bytes)
    LOGGER.info("Unified %d clients at round %d (%d bytes)", len(clients), round_id, sum(per_client))
    return per_client


__all__ = ["RHO_TOLERANCE", "check_weights", "fedavg", "rho_weights", "unify"]
