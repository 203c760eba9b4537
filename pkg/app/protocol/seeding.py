"""Named random streams and the per-client batch cursor."""

from __future__ import annotations

from typing import List

import numpy as np

STREAM_INIT = 0
STREAM_SAMPLER = 1
STREAM_INFERENCE = 2
STREAM_CLIENT = 3
STREAM_VISIT = 4


def stream(seed: int, stream_id: int, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id, index)``."""

    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream_id), int(index)]))


class BatchCursor:
    """Endless walk over per-epoch permutations of ``range(size)``.

    Each batch takes the next ``batch_size`` positions; a batch may straddle
    two epochs.
    """

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator) -> None:
        if size < 1:
            raise ValueError("BatchCursor needs a non-empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self._buffer: List[int] = []

    def next_indices(self) -> np.ndarray:
        while len(self._buffer) < self.batch_size:
            self._buffer.extend(int(i) for i in self.rng.permutation(self.size))
        batch, self._buffer = self._buffer[:self.batch_size], self._buffer[self.batch_size:]
        return np.asarray(batch, dtype=np.int64)


__all__ = [
    "BatchCursor",
    "STREAM_CLIENT",
    "STREAM_INFERENCE",
    "STREAM_INIT",
    "STREAM_SAMPLER",
    "STREAM_VISIT",
    "stream",
]
