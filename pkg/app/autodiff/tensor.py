"""Dense tensors and the recording graph used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

LOGGER = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_PRECISION: contextvars.ContextVar[str] = contextvars.ContextVar(
    "fedsis_precision", default="float64")
_ACTIVE_GRAPH: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "fedsis_active_graph", default=None)


class ShapeError(ValueError):
    """Raised when an operator receives operands of incompatible shapes."""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = "") -> None:
        rendered = " and ".join(str(tuple(shape)) for shape in shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = tuple(tuple(shape) for shape in shapes)


def default_dtype() -> np.dtype:
    return np.dtype(PRECISIONS[_PRECISION.get()])


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""

    if name not in PRECISIONS:
        raise ValueError(
            f"Unsupported precision '{name}'; expected one of {sorted(PRECISIONS)}")
    token = _PRECISION.set(name)
    try:
        yield
    finally:
        _PRECISION.reset(token)


class Tensor:
    """A numpy array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data: object, requires_grad: bool = False) -> None:
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating) or array.dtype != default_dtype():
            array = array.astype(default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation: its kind, operands, output and vector-Jacobian product."""

    index: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Graph:
    """Ordered record of the operations executed while the graph is active.

    Nodes are appended in execution order, so reverse order is a valid
    topological order for the backward sweep.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.consumed = False
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE_GRAPH.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _ACTIVE_GRAPH.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
            self,
            op: str,
            inputs: Sequence[Tensor],
            output: Tensor,
            backward: BackwardFn) -> None:
        if self.consumed:
            raise RuntimeError("Cannot record into a graph that was already differentiated")
        node = Node(len(self.nodes), op, tuple(inputs), output, backward)
        output._node = node.index
        self.nodes.append(node)

    def ops(self, kind: str) -> List[Node]:
        return [node for node in self.nodes if node.op == kind]

    def backward(self, loss: Tensor) -> None:
        """Differentiate a scalar loss with respect to every leaf that requires grad."""

        if loss.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        self.backward_from(loss, np.ones_like(loss.data))

    def backward_from(self, output: Tensor, grad: np.ndarray) -> None:
        """Propagate an upstream gradient ``grad`` of ``output`` back to the leaves."""

        if self.consumed:
            raise RuntimeError("Graph was already differentiated")
        grad = np.asarray(grad, dtype=output.data.dtype)
        if grad.shape != output.shape:
            raise ShapeError("backward_from", output.shape, grad.shape)
        if not output.requires_grad:
            raise ValueError("backward_from: output does not require grad")

        if output.is_leaf:
            _accumulate_leaf(output, grad)
            self._release()
            return

        pending: Dict[int, np.ndarray] = {id(output): grad}
        visited = 0
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            visited += 1
            input_grads = node.backward(upstream)
            for tensor, tensor_grad in zip(node.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    _accumulate_leaf(tensor, tensor_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + tensor_grad
                else:
                    pending[id(tensor)] = tensor_grad
        LOGGER.debug(
            "Backward sweep finished",
            extra={"nodes": len(self.nodes), "visited": visited})
        self._release()

    def _release(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []
        self.consumed = True


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.shape:
        raise ShapeError("accumulate_grad", tensor.shape, grad.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def current_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPH.get()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for tensor in tensors:
        tensor.grad = None


__all__ = [
    "Graph",
    "Node",
    "PRECISIONS",
    "ShapeError",
    "Tensor",
    "current_graph",
    "default_dtype",
    "precision",
    "zero_grads",
]
