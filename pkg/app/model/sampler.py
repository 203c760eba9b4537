"""Block sampler choosing the encoder depth whose tokens feed the adapter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..config import ConfigError


@dataclass
class BlockSampler:
    low: int
    high: int
    rng: np.random.Generator
    mode: str = "uniform"
    fixed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in ("uniform", "fixed"):
            raise ConfigError("model.sampler_mode", f"unknown sampler mode '{self.mode}'")
        if self.low > self.high:
            raise ConfigError("model.sampler_range", f"empty range [{self.low}, {self.high}]")
        if self.mode == "fixed" and self.fixed is None:
            raise ConfigError("model.fixed_block", "fixed mode needs a block index")

    def sample(self) -> int:
        if self.mode == "fixed":
            return int(self.fixed)
        return int(self.rng.integers(self.low, self.high + 1))

    def support(self) -> range:
        if self.mode == "fixed":
            return range(int(self.fixed), int(self.fixed) + 1)
        return range(self.low, self.high + 1)


__all__ = ["BlockSampler"]
