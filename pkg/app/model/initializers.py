"""Parameter initialisers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autodiff.tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float, bound: float = 2.0) -> np.ndarray:
    """Normal samples with std ``std``, redrawn until inside ``bound`` standard deviations."""

    values = rng.standard_normal(tuple(shape))
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return values * std


def he_kernel(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Truncated He-normal for an HWIO conv kernel."""

    fan_in = int(np.prod(shape[:-1]))
    return trunc_normal(rng, shape, float(np.sqrt(2.0 / fan_in)))


def param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return param(np.ones(shape))


__all__ = ["he_kernel", "ones", "param", "trunc_normal", "zeros"]
