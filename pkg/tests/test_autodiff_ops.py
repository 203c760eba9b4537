"""Forward values, backward sweeps and shape errors of the tensor engine."""

from __future__ import annotations

import math

import numpy as np
import pytest

from app.autodiff import ops
from app.autodiff.ops import RunningStats
from app.autodiff.tensor import Graph, ShapeError, Tensor, current_graph, default_dtype, precision


def leaf(values, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


def test_matmul_identity_returns_operand() -> None:
    a = np.random.default_rng(0).normal(size=(2, 2))
    out = ops.matmul(Tensor(np.eye(2)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_example() -> None:
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_softmax_of_equal_logits_is_uniform() -> None:
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_softmax_rows_are_distributions() -> None:
    logits = np.random.default_rng(1).normal(scale=30.0, size=(5, 7))
    out = ops.softmax(Tensor(logits)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)


@pytest.mark.parametrize("label", [0, 1])
def test_cross_entropy_of_uniform_logits_is_log_classes(label: int) -> None:
    loss = ops.cross_entropy(Tensor(np.zeros((1, 2))), np.array([label]))
    assert abs(float(loss.data) - math.log(2)) < 1e-12


def test_cross_entropy_rejects_out_of_range_labels() -> None:
    with pytest.raises(ValueError):
        ops.cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))


def test_batch_norm_eval_is_bitwise_deterministic() -> None:
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4, 4, 5)))
    stats = RunningStats(rng.normal(size=5), rng.uniform(0.5, 2.0, size=5))
    gamma, beta = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    first = ops.batch_norm(x, gamma, beta, stats, training=False).data
    second = ops.batch_norm(x, gamma, beta, stats, training=False).data
    assert np.array_equal(first, second)


def test_batch_norm_train_updates_running_stats_with_unbiased_variance() -> None:
    x = Tensor(np.arange(8, dtype=np.float64).reshape(4, 1, 1, 2))
    stats = RunningStats.fresh(2, momentum=0.5)
    ops.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, training=True)
    flat = x.data.reshape(-1, 2)
    np.testing.assert_allclose(stats.mean, 0.5 * flat.mean(axis=0))
    np.testing.assert_allclose(stats.var, 0.5 + 0.5 * flat.var(axis=0, ddof=1))


def test_layer_norm_rows_are_standardised() -> None:
    x = Tensor(np.random.default_rng(3).normal(loc=4.0, size=(2, 3, 8)))
    out = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_conv2d_matches_direct_loop() -> None:
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    expected = np.zeros((2, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = padded[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            expected[:, i, j, :] = np.einsum("bhwc,hwco->bo", patch, w) + b
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv_output_size() -> None:
    assert ops.conv_output_size(224, 3, 4, 1) == 56
    assert ops.conv_output_size(16, 3, 2, 1) == 8


def test_concat_and_slice_along_token_axis() -> None:
    a = Tensor(np.zeros((2, 1, 3)))
    b = Tensor(np.ones((2, 4, 3)))
    joined = ops.concat([a, b], axis=1)
    assert joined.shape == (2, 5, 3)
    np.testing.assert_array_equal(ops.slice_axis(joined, 1, 5).data, b.data)


def test_global_avg_pool_averages_spatial_axes() -> None:
    x = np.random.default_rng(5).normal(size=(2, 3, 3, 4))
    np.testing.assert_allclose(ops.global_avg_pool(Tensor(x)).data, x.mean(axis=(1, 2)))


@pytest.mark.parametrize(
    ("fn", "shapes"),
    [
        (lambda a, b: ops.matmul(a, b), ((2, 3), (2, 3))),
        (lambda a, b: ops.add(a, b), ((2, 3), (4, 3))),
        (lambda a, b: ops.bias_add(a, b), ((2, 3), (4,))),
        (lambda a, b: ops.conv2d(a, b), ((1, 4, 4, 3), (3, 3, 2, 1))),
        (lambda a, b: ops.concat([a, b], axis=1), ((2, 1, 3), (2, 1, 4))),
    ],
)
def test_shape_errors_name_the_op_and_shapes(fn, shapes) -> None:
    a, b = (Tensor(np.zeros(shape)) for shape in shapes)
    with pytest.raises(ShapeError) as excinfo:
        fn(a, b)
    assert str(shapes[0]) in str(excinfo.value)
    assert excinfo.value.op in str(excinfo.value)


def test_backward_of_sum_is_all_ones() -> None:
    w = leaf(np.random.default_rng(6).normal(size=(3, 2)))
    with Graph() as graph:
        loss = ops.reduce_sum(w)
    graph.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((3, 2)))


def test_backward_of_half_squared_norm_is_identity() -> None:
    w = leaf(np.random.default_rng(7).normal(size=(4,)))
    with Graph() as graph:
        loss = ops.scale(ops.reduce_sum(ops.mul(w, w)), 0.5)
    graph.backward(loss)
    np.testing.assert_allclose(w.grad, w.data, atol=1e-15)


def test_backward_rejects_non_scalar_loss() -> None:
    w = leaf(np.ones((2, 2)))
    with Graph() as graph:
        out = ops.scale(w, 2.0)
    with pytest.raises(ShapeError):
        graph.backward(out)


def test_graph_cannot_be_differentiated_twice() -> None:
    w = leaf(np.ones(3))
    with Graph() as graph:
        loss = ops.reduce_sum(w)
    graph.backward(loss)
    with pytest.raises(RuntimeError):
        graph.backward(loss)


def test_shared_operand_accumulates_gradients() -> None:
    w = leaf([2.0, -3.0])
    with Graph() as graph:
        loss = ops.reduce_sum(ops.add(ops.scale(w, 3.0), w))
    graph.backward(loss)
    np.testing.assert_array_equal(w.grad, [4.0, 4.0])


def test_broadcast_add_reduces_gradient_to_operand_shape() -> None:
    x = leaf(np.zeros((3, 4)))
    b = leaf(np.zeros((1, 4)))
    with Graph() as graph:
        loss = ops.reduce_sum(ops.add(x, b))
    graph.backward(loss)
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_no_graph_means_no_recording() -> None:
    assert current_graph() is None
    out = ops.add(leaf([1.0]), leaf([2.0]))
    assert out.requires_grad and out.is_leaf


def test_graph_records_in_execution_order() -> None:
    x = leaf([[1.0, -1.0]])
    with Graph() as graph:
        ops.relu(ops.scale(x, 2.0))
    assert [node.op for node in graph.nodes] == ["scale", "relu"]
    assert len(graph.ops("relu")) == 1


def test_precision_switches_default_dtype() -> None:
    with precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
        assert default_dtype() == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        with precision("float16"):
            pass
