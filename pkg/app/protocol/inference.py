"""Scoring with intermediate-representation sampling at inference time."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from ..autodiff.tensor import precision
from ..model.bundle import ModelBundle
from ..model.head import bonafide_scores
from .local import forward_logits

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferencePolicy:
    """How depths are chosen when scoring.

    ``kind`` is ``sampled``, ``fixed`` or ``averaged``; ``cls_path`` scores
    from the depth-L cls token and ignores the rest.
    """

    kind: str = "sampled"
    granularity: str = "batch"
    fixed_block: Optional[int] = None
    draws: int = 8
    low: int = 1
    high: int = 1
    cls_path: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("sampled", "fixed", "averaged"):
            raise ValueError(f"unknown inference policy '{self.kind}'")
        if self.granularity not in ("batch", "sample"):
            raise ValueError(f"unknown granularity '{self.granularity}'")
        if self.kind == "fixed" and self.fixed_block is None:
            raise ValueError("fixed inference policy needs fixed_block")
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


def _batches(count: int, batch_size: int) -> Iterator[slice]:
    for start in range(0, count, batch_size):
        yield slice(start, min(start + batch_size, count))


def _score_at(bundle: ModelBundle, images: np.ndarray, block: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    logits, features = forward_logits(bundle, images, block, training=False)
    return bonafide_scores(logits.data), features.data


def _draw(policy: InferencePolicy, rng: np.random.Generator, size: Optional[int] = None):
    return rng.integers(policy.low, policy.high + 1, size=size)


def score_batch(
        bundle: ModelBundle,
        images: np.ndarray,
        policy: InferencePolicy,
        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Bonafide scores and pre-head features for one batch."""

    if policy.cls_path:
        return _score_at(bundle, images, None)
    if policy.kind == "fixed":
        return _score_at(bundle, images, policy.fixed_block)
    if policy.kind == "averaged":
        counts = Counter(int(b) for b in _draw(policy, rng, policy.draws))
        scores = np.zeros(len(images))
        features = np.zeros((len(images), bundle.config.dim))
        for block in sorted(counts):
            block_scores, block_features = _score_at(bundle, images, block)
            scores += counts[block] * block_scores
            features += counts[block] * block_features
        return scores / policy.draws, features / policy.draws
    if policy.granularity == "batch":
        return _score_at(bundle, images, int(_draw(policy, rng)))

    blocks = _draw(policy, rng, len(images))
    scores = np.empty(len(images))
    features = np.empty((len(images), bundle.config.dim))
    for block in np.unique(blocks):
        rows = np.flatnonzero(blocks == block)
        scores[rows], features[rows] = _score_at(bundle, images[rows], int(block))
    return scores, features


def infer_with_features(
        bundle: ModelBundle,
        images: np.ndarray,
        policy: InferencePolicy,
        rng: np.random.Generator,
        batch_size: int = 64,
        dtype: str = "float64") -> Tuple[np.ndarray, np.ndarray]:
    scores = np.empty(len(images))
    features = np.empty((len(images), bundle.config.dim))
    with precision(dtype):
        for rows in _batches(len(images), batch_size):
            scores[rows], features[rows] = score_batch(bundle, images[rows], policy, rng)
    LOGGER.debug("Scored samples", extra={"samples": len(images), "policy": policy.kind})
    return scores, features


def infer(
        bundle: ModelBundle,
        images: np.ndarray,
        policy: InferencePolicy,
        rng: np.random.Generator,
        batch_size: int = 64,
        dtype: str = "float64") -> np.ndarray:
    """Bonafide score per sample; adapter norms run in eval mode."""

    return infer_with_features(bundle, images, policy, rng, batch_size, dtype)[0]


__all__ = ["InferencePolicy", "infer", "infer_with_features", "score_batch"]
