"""Central finite-difference checks for recorded gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import Graph, Tensor

LOGGER = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    relative_error: float
    coordinates: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the checked coordinates."""

    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return float(np.linalg.norm(analytic - numeric)) / scale


def check_gradients(
        loss_fn: Callable[[], Tensor],
        tensors: Mapping[str, Tensor],
        step: float = DEFAULT_STEP,
        max_coordinates: Optional[int] = None,
        rng: Optional[np.random.Generator] = None) -> Dict[str, GradCheckResult]:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must rebuild the loss from the current tensor values on every
    call and must not mutate state. When ``max_coordinates`` is set, each
    tensor is checked at a random subset of that many coordinates.
    """

    for tensor in tensors.values():
        tensor.grad = None
    with Graph() as graph:
        loss = loss_fn()
    graph.backward(loss)
    analytic = {
        name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in tensors.items()}

    rng = rng or np.random.default_rng(0)
    results: Dict[str, GradCheckResult] = {}
    for name, tensor in tensors.items():
        flat = tensor.data.reshape(-1)
        if max_coordinates is not None and flat.size > max_coordinates:
            coords = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
        else:
            coords = np.arange(flat.size)
        numeric = np.empty(coords.size, dtype=np.float64)
        working = tensor.data.copy()
        view = working.reshape(-1)
        for slot, coord in enumerate(coords):
            original = view[coord]
            view[coord] = original + step
            tensor.data = working.copy()
            upper = float(loss_fn().data)
            view[coord] = original - step
            tensor.data = working.copy()
            lower = float(loss_fn().data)
            view[coord] = original
            numeric[slot] = (upper - lower) / (2.0 * step)
        tensor.data = working
        error = relative_error(analytic[name].reshape(-1)[coords], numeric)
        results[name] = GradCheckResult(name, error, int(coords.size))
        LOGGER.debug("Gradient check", extra={"tensor": name, "error": error, "coordinates": int(coords.size)})
    return results


def max_relative_error(results: Mapping[str, GradCheckResult]) -> float:
    return max((result.relative_error for result in results.values()), default=0.0)


__all__ = [
    "DEFAULT_STEP",
    "GradCheckResult",
    "check_gradients",
    "max_relative_error",
    "relative_error",
]
