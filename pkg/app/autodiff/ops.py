"""Differentiable operators over :class:`Tensor`.

Every operator computes its forward value with numpy and, when a graph is
active and an operand requires grad, records a closure producing the
vector-Jacobian product. Closures capture the numpy arrays seen during the
forward pass, never the tensors, so later in-place rebinding of parameter
data cannot leak into a pending backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import BackwardFn, ShapeError, Tensor, current_graph, default_dtype

_GELU_C = math.sqrt(2.0 / math.pi)


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: BackwardFn) -> Tensor:
    requires_grad = any(tensor.requires_grad for tensor in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    graph = current_graph()
    if requires_grad and graph is not None:
        graph.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError as exc:
        raise ShapeError(op, a, b) from exc


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    a_shape, b_shape = a.shape, b.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _make("add", (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _make("mul", (a, b), a_data * b_data, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _make("scale", (a,), a.data * factor, backward)


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", (a,), np.asarray(a.data.sum()), backward)


def mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.size)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * mask,)

    return _make("relu", (a,), a.data * mask, backward)


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation."""

    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        return (g * local,)

    return _make("gelu", (a,), 0.5 * x * (1.0 + t), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""

    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", (a,), y, backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)
        if b_data.ndim == 2:
            grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)
        return grad_a, grad_b

    return _make("matmul", (a, b), a_data @ b_data, backward)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError("bias_add", x.shape, bias.shape)
    bias_shape = bias.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g, g.reshape(-1, bias_shape[0]).sum(axis=0)

    return _make("bias_add", (x, bias), x.data + bias.data, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return bias_add(out, bias) if bias is not None else out


# -- shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError("reshape", original, tuple(shape)) from exc

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(original),)

    return _make("reshape", (a,), data, backward)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("permute", a.shape, axes, detail="axes must be a permutation")
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _make("permute", (a,), np.transpose(a.data, axes), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    original = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError("broadcast_to", original, shape) from exc

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (_unbroadcast(g, original),)

    return _make("broadcast_to", (a,), data, backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the token axis (axis 1 by default)."""

    if not tensors:
        raise ValueError("concat requires at least one tensor")
    first = tensors[0].shape
    for tensor in tensors[1:]:
        other = tensor.shape
        if len(other) != len(first) or any(
                x != y for i, (x, y) in enumerate(zip(first, other)) if i != axis % len(first)):
            raise ShapeError("concat", first, other)
    sizes = [tensor.shape[axis] for tensor in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Slice ``[start:stop]`` along the token axis (axis 1 by default)."""

    extent = a.shape[axis]
    if not 0 <= start < stop <= extent:
        raise ShapeError("slice_axis", a.shape, (start, stop), detail=f"axis {axis}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)
    shape = a.shape

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make("slice", (a,), a.data[key].copy(), backward)


# -- normalisation ---------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gamma_data = gamma.data

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gamma_data
        dx = inv / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, width)
        return dx, (flat_g * xhat.reshape(-1, width)).sum(axis=0), flat_g.sum(axis=0)

    return _make("layer_norm", (x, gamma, beta), xhat * gamma_data + beta.data, backward)


@dataclass
class RunningStats:
    """Batch-norm running statistics; arrays are rebound, never written in place."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        dtype = default_dtype()
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm(
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        stats: RunningStats,
        training: bool,
        eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis but the channel (last) axis."""

    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = tuple(range(x.data.ndim - 1))
    count = int(np.prod([x.shape[axis] for axis in axes]))
    gamma_data = gamma.data

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        stats.mean = (1.0 - stats.momentum) * stats.mean + stats.momentum * mu
        stats.var = (1.0 - stats.momentum) * stats.var + stats.momentum * unbiased
    else:
        mu = stats.mean
        var = stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma_data
        if training:
            dx = inv / count * (
                count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    op = "batch_norm_train" if training else "batch_norm_eval"
    return _make(op, (x, gamma, beta), xhat * gamma_data + beta.data, backward)


# -- convolution and pooling -------------------------------------------------------


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    batch, _, _, channels = padded.shape
    cols = np.empty((batch, ho, wo, kh, kw, channels), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
        x: Tensor,
        weight: Tensor,
        bias: Optional[Tensor] = None,
        stride: int = 1,
        padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an HWIO kernel."""

    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[3],):
        raise ShapeError("conv2d", weight.shape, bias.shape)
    batch, height, width, _ = x.shape
    kh, kw, c_in, c_out = weight.shape
    ho = conv_output_size(height, kh, stride, padding)
    wo = conv_output_size(width, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")

    pad = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    padded = np.pad(x.data, pad) if padding else x.data
    cols = _im2col(padded, kh, kw, stride, ho, wo).reshape(batch * ho * wo, kh * kw * c_in)
    kernel = weight.data.reshape(kh * kw * c_in, c_out)
    out = (cols @ kernel).reshape(batch, ho, wo, c_out)
    if bias is not None:
        out = out + bias.data
    padded_shape = padded.shape

    def backward(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        flat = g.reshape(-1, c_out)
        grad_w = (cols.T @ flat).reshape(kh, kw, c_in, c_out)
        dcols = (flat @ kernel.T).reshape(batch, ho, wo, kh, kw, c_in)
        grad_padded = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        grad_x = grad_padded[:, padding:padding + height, padding:padding + width, :]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, flat.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", inputs, out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average NHWC input over its spatial axes, giving ``B x C``."""

    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="expected NHWC input")
    x_shape = x.shape
    area = x_shape[1] * x_shape[2]

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(g[:, None, None, :] / area, x_shape).copy(),)

    return _make("global_avg_pool", (x,), x.data.mean(axis=(1, 2)), backward)


# -- losses and attention -----------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``B x C`` logits against integer labels."""

    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    batch, classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"cross_entropy: labels must lie in [0, {classes})")
    rows = np.arange(batch)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    probs = exp / total
    loss = -log_probs[rows, labels].mean()

    def backward(g: np.ndarray) -> Tuple[np.ndarray]:
        local = probs.copy()
        local[rows, labels] -= 1.0
        return (local * (g / batch),)

    return _make("cross_entropy", (logits,), np.asarray(loss), backward)


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], heads: int) -> Tensor:
    """Scaled dot-product self-attention composed from the primitives above."""

    batch, tokens, width = x.shape
    if width % heads:
        raise ShapeError("multi_head_attention", x.shape, (heads,), detail="width not divisible by heads")
    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return permute(reshape(t, (batch, tokens, heads, head_dim)), (0, 2, 1, 3))

    q = split(linear(x, params["wq"], params["bq"]))
    k = split(linear(x, params["wk"], params["bk"]))
    v = split(linear(x, params["wv"], params["bv"]))
    scores = scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    context = matmul(softmax(scores), v)
    merged = reshape(permute(context, (0, 2, 1, 3)), (batch, tokens, width))
    return linear(merged, params["wo"], params["bo"])


__all__ = [
    "RunningStats",
    "add",
    "batch_norm",
    "bias_add",
    "broadcast_to",
    "concat",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "gelu",
    "global_avg_pool",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "permute",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "slice_axis",
    "softmax",
]
