"""Leave-one-domain-out and one-attack-per-client partitioning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .dataset import ATTACK_NAMES, ATTACK_NONE, ATTACK_PRINT, ATTACK_REPLAY, DomainDataset

LOGGER = logging.getLogger(__name__)

PER_DOMAIN = "per-domain"
PER_DOMAIN_PER_ATTACK = "per-domain-per-attack"


@dataclass(frozen=True)
class PartitionPlan:
    clients: List[DomainDataset]
    target: DomainDataset
    mode: str = PER_DOMAIN
    client_names: List[str] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def client_sizes(self) -> List[int]:
        return [len(client) for client in self.clients]


def _domain_id(dataset: DomainDataset) -> int:
    ids = dataset.domain_ids
    if len(ids) != 1:
        raise ValueError(f"expected a single-domain dataset, found domains {list(ids)}")
    return ids[0]


def leave_one_out(domains: Sequence[DomainDataset], target_id: int) -> PartitionPlan:
    """Hold ``target_id`` out and make every other domain a client."""

    if len(domains) < 2:
        raise ValueError("leave-one-out needs at least 2 domains")
    ids = [_domain_id(d) for d in domains]
    if target_id not in ids:
        raise ValueError(f"target domain {target_id} not among domains {ids}")
    clients = [d for d, i in zip(domains, ids) if i != target_id]
    names = [f"domain{i}" for i in ids if i != target_id]
    LOGGER.info("Leave-one-out partition: target=%d clients=%s", target_id, names)
    return PartitionPlan(clients, domains[ids.index(target_id)], PER_DOMAIN, names)


def split_by_attack(plan: PartitionPlan) -> PartitionPlan:
    """Split each client into a print sub-client and a replay sub-client.

    Bonafide groups are divided in two halves, whole groups at a time, so the
    two sub-clients never share a bonafide sample or group.
    """

    if plan.mode != PER_DOMAIN:
        raise ValueError(f"split_by_attack expects a {PER_DOMAIN} plan, got {plan.mode}")
    clients: List[DomainDataset] = []
    names: List[str] = []
    for client, name in zip(plan.clients, plan.client_names or [f"client{i}" for i in range(plan.num_clients)]):
        present = set(client.attack_types())
        missing = {ATTACK_PRINT, ATTACK_REPLAY} - present
        if missing:
            raise ValueError(
                f"{name} lacks attack types {sorted(ATTACK_NAMES[m] for m in missing)}")
        bonafide_groups = np.unique(client.groups[client.attacks == ATTACK_NONE])
        halves = np.array_split(bonafide_groups, 2)
        for attack, half in zip((ATTACK_PRINT, ATTACK_REPLAY), halves):
            mask = (client.attacks == attack) | np.isin(client.groups, half) & (client.attacks == ATTACK_NONE)
            clients.append(client.subset(np.flatnonzero(mask)))
            names.append(f"{name}-{ATTACK_NAMES[attack]}")
    LOGGER.info("Split %d clients into %d one-attack sub-clients", plan.num_clients, len(clients))
    return PartitionPlan(clients, plan.target, PER_DOMAIN_PER_ATTACK, names)


__all__ = ["PER_DOMAIN", "PER_DOMAIN_PER_ATTACK", "PartitionPlan", "leave_one_out", "split_by_attack"]
