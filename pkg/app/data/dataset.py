"""Labelled image collections with domain, attack and group annotations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ATTACK_NONE = 0
ATTACK_PRINT = 1
ATTACK_REPLAY = 2
ATTACK_NAMES = {ATTACK_NONE: "none", ATTACK_PRINT: "print", ATTACK_REPLAY: "replay"}


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    label: int
    domain: int
    attack: int
    group: int


@dataclass(frozen=True)
class DomainDataset:
    """Parallel arrays; ``uids`` identify samples across partitions."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    attacks: np.ndarray
    groups: np.ndarray
    uids: np.ndarray

    def __post_init__(self) -> None:
        count = len(self.images)
        for name in ("labels", "domains", "attacks", "groups", "uids"):
            if len(getattr(self, name)) != count:
                raise ValueError(f"DomainDataset.{name} has {len(getattr(self, name))} rows, expected {count}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if np.any((self.labels == 1) != (self.attacks == ATTACK_NONE)):
            raise ValueError("label 1 must coincide with attack type 'none'")
        for array in (self.images, self.labels, self.domains, self.attacks, self.groups, self.uids):
            array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> SyntheticSample:
        return SyntheticSample(
            self.images[index], int(self.labels[index]), int(self.domains[index]),
            int(self.attacks[index]), int(self.groups[index]))

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    @property
    def domain_ids(self) -> Sequence[int]:
        return sorted(int(d) for d in np.unique(self.domains))

    def attack_types(self) -> Sequence[int]:
        return sorted(int(a) for a in np.unique(self.attacks) if a != ATTACK_NONE)

    def subset(self, indices: Iterable[int]) -> "DomainDataset":
        index = np.asarray(list(indices), dtype=np.int64)
        return DomainDataset(
            self.images[index].copy(), self.labels[index].copy(), self.domains[index].copy(),
            self.attacks[index].copy(), self.groups[index].copy(), self.uids[index].copy())

    @classmethod
    def concat(cls, datasets: Sequence["DomainDataset"]) -> "DomainDataset":
        if not datasets:
            raise ValueError("concat requires at least one dataset")
        return cls(*(
            np.concatenate([getattr(d, name) for d in datasets])
            for name in ("images", "labels", "domains", "attacks", "groups", "uids")))


def split_groups(dataset: DomainDataset, fraction: float, rng: np.random.Generator) -> tuple:
    """Split by group into ``(remaining, held_out)`` with about ``fraction`` of groups held out per label."""

    held = []
    for label in (0, 1):
        groups = np.unique(dataset.groups[dataset.labels == label])
        if len(groups) < 2:
            continue
        count = min(len(groups) - 1, max(1, int(round(fraction * len(groups)))))
        held.extend(rng.choice(groups, size=count, replace=False).tolist())
    mask = np.isin(dataset.groups, np.asarray(held, dtype=dataset.groups.dtype))
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask))


__all__ = [
    "ATTACK_NAMES",
    "ATTACK_NONE",
    "ATTACK_PRINT",
    "ATTACK_REPLAY",
    "DomainDataset",
    "SyntheticSample",
    "split_groups",
]
