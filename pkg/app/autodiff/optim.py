"""Adam with bias correction and coupled L2 weight decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor

LOGGER = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ("pos_embed", "cls_token")


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient handed to the optimizer contains NaN or Inf."""

    def __init__(self, parameter: str) -> None:
        super().__init__(f"Non-finite gradient for parameter '{parameter}'")
        self.parameter = parameter


def default_decay_filter(name: str, tensor: Tensor) -> bool:
    """Decay matrices and kernels; exempt biases, norm affines and embeddings."""

    return tensor.data.ndim >= 2 and not name.endswith(NO_DECAY_SUFFIXES)


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    slots: Dict[str, AdamSlot] = field(default_factory=dict)


class Adam:
    """Adam over a named parameter set.

    Parameters whose ``grad`` is ``None`` are skipped entirely: neither the
    moments nor the step count move. Parameter arrays are rebound on update
    so arrays captured by a pending backward closure keep their values.
    """

    def __init__(
            self,
            params: Mapping[str, Tensor],
            lr: float = 1e-3,
            betas: tuple = (0.9, 0.999),
            eps: float = 1e-8,
            weight_decay: float = 0.0,
            decay_filter: Callable[[str, Tensor], bool] = default_decay_filter) -> None:
        self.params: Dict[str, Tensor] = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self._decay = {name: decay_filter(name, tensor) for name, tensor in self.params.items()}
        for name, tensor in self.params.items():
            self.state.slots[name] = AdamSlot(np.zeros_like(tensor.data), np.zeros_like(tensor.data))

    def step(self, names: Optional[Iterable[str]] = None) -> int:
        """Apply one update to ``names`` (all parameters by default); return how many moved."""

        selected = list(self.params) if names is None else list(names)
        pending = []
        for name in selected:
            grad = self.params[name].grad
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(name)
            pending.append((name, grad))

        state = self.state
        for name, grad in pending:
            param = self.params[name]
            if state.weight_decay and self._decay[name]:
                grad = grad + state.weight_decay * param.data
            slot = state.slots[name]
            slot.t += 1
            slot.m = state.beta1 * slot.m + (1.0 - state.beta1) * grad
            slot.v = state.beta2 * slot.v + (1.0 - state.beta2) * grad * grad
            m_hat = slot.m / (1.0 - state.beta1 ** slot.t)
            v_hat = slot.v / (1.0 - state.beta2 ** slot.t)
            param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        LOGGER.debug("Adam step", extra={"updated": len(pending), "selected": len(selected)})
        return len(pending)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def reset_moments(self) -> None:
        for name, tensor in self.params.items():
            self.state.slots[name] = AdamSlot(np.zeros_like(tensor.data), np.zeros_like(tensor.data))

    def step_count(self, name: str) -> int:
        return self.state.slots[name].t


__all__ = [
    "Adam",
    "AdamSlot",
    "AdamState",
    "NO_DECAY_SUFFIXES",
    "NonFiniteGradientError",
    "default_decay_filter",
]
