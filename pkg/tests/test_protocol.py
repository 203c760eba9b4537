"""Client and server state machines, message accounting and per-block encoder averaging."""

from __future__ import annotations

import copy
import math
from types import SimpleNamespace

import numpy as np
import pytest

from app.autodiff import ops
from app.autodiff.serialization import dumps, serialized_size
from app.autodiff.tensor import Graph, Tensor
from app.data.partition import leave_one_out
from app.model.adapter import adapt
from app.model.bundle import clone_params
from app.model.encoder import block_of, encode_prefix
from app.model.head import classify
from app.model.tokenizer import tokenize
from app.protocol.client import FEATURES, FEATURES_GRAD, TOKENS, TOKENS_GRAD
from app.protocol.messages import PARAM_KINDS, MessageKind, ProtocolError, ProtocolMessage
from app.protocol.training import init_and_broadcast, optimizer_settings
from helpers import tiny_experiment


def _federation(domains, seed: int = 0, target: int = 3, **sections):
    sections.setdefault("model", {"depth": 6})
    sections.setdefault("protocol", {})
    sections["protocol"] = {"weight_decay": 0.0, **sections["protocol"]}
    config = tiny_experiment(target=target, **sections)
    plan = leave_one_out(domains[:config.data.num_domains], target)
    return init_and_broadcast(config, plan.clients, seed)


@pytest.fixture
def fed(domains):
    return _federation(domains)


def _stub_blocks(server, blocks):
    server.sampler = SimpleNamespace(sample=iter(blocks).__next__)


def _exchange(fed, k, images, labels, round_id=1):
    client, server = fed.clients[k], fed.server
    token_batch = client.forward(round_id, images, labels)
    pseudo_batch = server.forward(token_batch)
    pseudo_grad = client.loss_and_backward(pseudo_batch)
    token_grad = server.backward(pseudo_grad)
    loss = client.backward(token_grad)
    return [token_batch, pseudo_batch, pseudo_grad, token_grad], loss


def _monolithic(fed, k, images, labels, block):
    """Gradients of one request computed in a single graph on copies of the live state."""

    server, client = fed.server, fed.clients[k]
    config = server.model_config
    encoder, adapter = clone_params(server.encoder), clone_params(server.adapter)
    tokenizer, head = clone_params(client.tokenizer), clone_params(client.head)
    stats = copy.deepcopy(server.adapter_stats)
    with Graph() as graph:
        tokens = tokenize(tokenizer, images, config)
        patches, _ = encode_prefix(encoder, tokens, block, config)
        features = adapt(adapter, stats, patches, True, config)
        loss = ops.cross_entropy(classify(head, features), labels)
    graph.backward(loss)
    return SimpleNamespace(encoder=encoder, tokenizer=tokenizer, loss=float(loss.data))


def test_init_gives_every_client_the_same_tokenizer_and_head(fed) -> None:
    lead = fed.clients[0]
    for client in fed.clients[1:]:
        for name, tensor in lead.tokenizer.items():
            assert np.array_equal(client.tokenizer[name].data, tensor.data)
            assert client.tokenizer[name] is not tensor
        for name, tensor in lead.head.items():
            assert np.array_equal(client.head[name].data, tensor.data)


def test_init_is_reproducible(domains) -> None:
    first, second = _federation(domains, seed=5), _federation(domains, seed=5)
    for (name, a), (_, b) in zip(first.bundle().named_arrays().items(), second.bundle().named_arrays().items()):
        assert np.array_equal(a, b), name


def test_init_broadcast_bytes_equal_the_archive_size(fed) -> None:
    upload = fed.clients[0].upload(0)
    values = sum(array.size for array in upload.payload.values())
    for k in range(len(fed.clients)):
        sent = fed.transport.bytes_for(0, k, MessageKind.PARAM_BROADCAST)
        assert sent == serialized_size(upload.payload) == len(dumps(upload.payload))
        assert sent > values * 8


def test_only_parameter_messages_carry_archive_overhead() -> None:
    payload = {"weight": np.ones((2, 3))}
    for kind in MessageKind:
        message = ProtocolMessage(kind, 1, 0, "1-0-0", payload)
        expected = len(dumps(payload)) if kind in PARAM_KINDS else 6 * 8
        assert message.payload_bytes == expected, kind


def test_token_batch_bytes(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    message = fed.clients[0].forward(1, images, labels)
    config = fed.server.model_config
    assert message.payload_bytes == len(images) * config.tokens * config.dim * 8 == 4 * 16 * 16 * 8


def test_messages_refuse_integer_payloads() -> None:
    with pytest.raises(ProtocolError, match="floating-point"):
        ProtocolMessage(MessageKind.TOKEN_BATCH, 1, 0, "1-0-1", {"labels": np.array([0, 1])})


def test_exchange_carries_neither_images_nor_labels(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    messages, _ = _exchange(fed, 0, images, labels)
    assert [m.kind for m in messages] == [
        MessageKind.TOKEN_BATCH, MessageKind.PSEUDO_CLASS_BATCH,
        MessageKind.PSEUDO_CLASS_GRAD, MessageKind.TOKEN_GRAD]
    for message in messages:
        assert set(message.payload) <= {TOKENS, FEATURES, FEATURES_GRAD, TOKENS_GRAD}
        for array in message.payload.values():
            assert np.issubdtype(array.dtype, np.floating)
            assert array.shape != images.shape


def test_same_batch_and_tokenizer_give_same_payload(domains) -> None:
    first, second = _federation(domains), _federation(domains)
    images, labels = first.clients[1].next_batch()
    a = first.clients[1].forward(1, images, labels)
    b = second.clients[1].forward(1, images, labels)
    assert np.array_equal(a.tensor(TOKENS), b.tensor(TOKENS))


def test_client_allows_one_outstanding_request(fed) -> None:
    client = fed.clients[0]
    images, labels = client.next_batch()
    client.forward(1, images, labels)
    with pytest.raises(ProtocolError, match="outstanding") as excinfo:
        client.forward(1, images, labels)
    assert excinfo.value.client_id == 0
    assert "round=1" in str(excinfo.value)


def test_client_rejects_label_count_mismatch(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    with pytest.raises(ProtocolError, match="labels"):
        fed.clients[0].forward(1, images, labels[:-1])


def test_client_rejects_feature_rows_for_other_batch_size(fed) -> None:
    client = fed.clients[0]
    images, labels = client.next_batch()
    token_batch = client.forward(1, images, labels)
    reply = fed.server.forward(token_batch)
    short = ProtocolMessage(
        reply.kind, reply.round_id, reply.client_id, reply.request_id, {FEATURES: reply.tensor(FEATURES)[:2]})
    with pytest.raises(ProtocolError, match="feature rows"):
        client.loss_and_backward(short)


def test_client_rejects_wrong_message_kind(fed) -> None:
    client = fed.clients[0]
    images, labels = client.next_batch()
    token_batch = client.forward(1, images, labels)
    with pytest.raises(ProtocolError, match="expected pseudo_class_batch"):
        client.loss_and_backward(token_batch)


def test_server_rejects_duplicate_request(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    token_batch = fed.clients[0].forward(1, images, labels)
    fed.server.forward(token_batch)
    with pytest.raises(ProtocolError, match="duplicate"):
        fed.server.forward(token_batch)


def test_server_rejects_request_from_another_round(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    fed.server.forward(fed.clients[0].forward(1, images, labels))
    images, labels = fed.clients[1].next_batch()
    with pytest.raises(ProtocolError, match="round 1 is open"):
        fed.server.forward(fed.clients[1].forward(2, images, labels))


def test_server_forward_matches_monolithic_adapter_path(fed) -> None:
    server = fed.server
    config = server.model_config
    images, labels = fed.clients[0].next_batch()
    token_batch = fed.clients[0].forward(1, images, labels)
    block = server.block_for(1, 0)
    stats = copy.deepcopy(server.adapter_stats)
    patches, _ = encode_prefix(server.encoder, Tensor(token_batch.tensor(TOKENS)), block, config)
    expected = adapt(server.adapter, stats, patches, True, config)

    reply = server.forward(token_batch)

    assert np.array_equal(reply.tensor(FEATURES), expected.data)
    assert server.block_for(1, 0) == block


def test_cache_lives_from_forward_to_backward(fed) -> None:
    client, server = fed.clients[0], fed.server
    images, labels = client.next_batch()
    token_batch = client.forward(1, images, labels)
    assert not server.has_cached(token_batch.request_id)
    pseudo_grad = client.loss_and_backward(server.forward(token_batch))
    assert server.has_cached(token_batch.request_id)
    server.backward(pseudo_grad)
    assert not server.has_cached(token_batch.request_id)
    with pytest.raises(ProtocolError, match="no cached forward"):
        server.backward(pseudo_grad)


def test_uniform_logits_give_ln2_loss(fed) -> None:
    client = fed.clients[0]
    for tensor in client.head.values():
        tensor.data = np.zeros_like(tensor.data)
    images, labels = client.next_batch()
    _, loss = _exchange(fed, 0, images, labels)
    assert abs(loss - math.log(2)) < 1e-12


def test_saturated_correct_logits_give_vanishing_gradient(fed) -> None:
    client = fed.clients[0]
    rows = np.flatnonzero(client.dataset.labels == 1)[:4]
    images, labels = client.dataset.images[rows], client.dataset.labels[rows]
    client.head["bias"].data = np.array([-50.0, 50.0])
    token_batch = client.forward(1, images, labels)
    pseudo_grad = client.loss_and_backward(fed.server.forward(token_batch))
    assert np.abs(pseudo_grad.tensor(FEATURES_GRAD)).max() < 1e-30
    assert client._pending.loss < 1e-30


def test_feature_gradient_matches_monolithic_head_backward(fed) -> None:
    client = fed.clients[0]
    images, labels = client.next_batch()
    pseudo_batch = fed.server.forward(client.forward(1, images, labels))
    head = clone_params(client.head)
    features = Tensor(pseudo_batch.tensor(FEATURES), requires_grad=True)
    with Graph() as graph:
        loss = ops.cross_entropy(classify(head, features), labels)
    graph.backward(loss)

    pseudo_grad = client.loss_and_backward(pseudo_batch)

    assert np.array_equal(pseudo_grad.tensor(FEATURES_GRAD), features.grad)


def test_gradient_messages_mirror_forward_messages(fed) -> None:
    images, labels = fed.clients[1].next_batch()
    (token_batch, pseudo_batch, pseudo_grad, token_grad), _ = _exchange(fed, 1, images, labels)
    assert token_grad.tensor(TOKENS_GRAD).shape == token_batch.tensor(TOKENS).shape
    assert token_grad.payload_bytes == token_batch.payload_bytes
    assert pseudo_grad.payload_bytes == pseudo_batch.payload_bytes
    request = token_batch.request_id
    transport = fed.transport
    transport.send(token_batch)
    transport.send(token_grad)
    assert transport.bytes_for_request(request, MessageKind.TOKEN_BATCH) == \
        transport.bytes_for_request(request, MessageKind.TOKEN_GRAD)


def test_blocks_past_the_drawn_depth_get_no_gradient(fed) -> None:
    server = fed.server
    _stub_blocks(server, [2])
    images, labels = fed.clients[0].next_batch()
    _exchange(fed, 0, images, labels)
    assert {block_of(name) for name in server._accumulator} == {0, 1, 2}
    assert server.contributors == {0: 1, 1: 1, 2: 1}


def test_accumulator_is_sum_of_client_contributions(fed) -> None:
    server = fed.server
    _stub_blocks(server, [2, 5])
    expected = {}
    for k, block in enumerate((2, 5)):
        images, labels = fed.clients[k].next_batch()
        reference = _monolithic(fed, k, images, labels, block)
        for name, tensor in reference.encoder.items():
            if tensor.grad is not None:
                expected[name] = expected[name] + tensor.grad if name in expected else tensor.grad
        _exchange(fed, k, images, labels)

    assert set(server._accumulator) == set(expected)
    for name, grad in expected.items():
        np.testing.assert_allclose(server._accumulator[name], grad, rtol=0, atol=1e-12)
    assert any(block_of(name) == 5 for name in expected)
    assert not any(block_of(name) == 6 for name in expected)


def _round_with_spy(fed, blocks, monkeypatch):
    server = fed.server
    _stub_blocks(server, blocks)
    for k in range(len(blocks)):
        images, labels = fed.clients[k].next_batch()
        _exchange(fed, k, images, labels)
    accumulated = {name: grad.copy() for name, grad in server._accumulator.items()}
    before = {name: tensor.data.copy() for name, tensor in server.encoder.items()}
    captured = {}
    step = server.encoder_opt.step

    def spy(names=None):
        captured.update({n: None if t.grad is None else t.grad.copy() for n, t in server.encoder.items()})
        return step(names)

    monkeypatch.setattr(server.encoder_opt, "step", spy)
    contributors = server.end_round()
    return accumulated, before, captured, contributors


@pytest.mark.parametrize(
    ("blocks", "contributors"),
    [
        ((2, 5, 5), {0: 3, 1: 3, 2: 3, 3: 2, 4: 2, 5: 2}),
        ((3, 3, 3), {0: 3, 1: 3, 2: 3, 3: 3}),
    ],
)
def test_encoder_gradient_is_averaged_over_contributors(fed, monkeypatch, blocks, contributors) -> None:
    accumulated, before, captured, counted = _round_with_spy(fed, blocks, monkeypatch)
    assert counted == contributors
    server = fed.server
    for name, tensor in server.encoder.items():
        count = contributors.get(block_of(name), 0)
        if count == 0:
            assert captured[name] is None
            assert np.array_equal(tensor.data, before[name])
            assert server.encoder_opt.step_count(name) == 0
        else:
            assert np.array_equal(captured[name], accumulated[name] / count), name
            assert server.encoder_opt.step_count(name) == 1
    assert server._accumulator == {} and server.contributors == {}


def test_clients_divisor_divides_every_block_by_k(domains, monkeypatch) -> None:
    fed = _federation(domains, protocol={"encoder_divisor": "clients"})
    accumulated, _, captured, _ = _round_with_spy(fed, (2, 5, 5), monkeypatch)
    name = "blocks.4.attn.wq"
    assert np.array_equal(captured[name], accumulated[name] / 3)


def test_single_client_round_equals_immediate_update(domains) -> None:
    fed = _federation(domains, target=1, data={"num_domains": 2})
    assert len(fed.clients) == 1
    server = fed.server
    _stub_blocks(server, [3])
    images, labels = fed.clients[0].next_batch()
    reference = _monolithic(fed, 0, images, labels, 3)
    optimizer = optimizer_settings(tiny_experiment(protocol={"weight_decay": 0.0})).build(reference.encoder)
    optimizer.step()

    _exchange(fed, 0, images, labels)
    server.end_round()

    for name, tensor in server.encoder.items():
        np.testing.assert_allclose(tensor.data, reference.encoder[name].data, rtol=0, atol=1e-12)


def test_end_round_with_unfinished_request_is_rejected(fed) -> None:
    images, labels = fed.clients[0].next_batch()
    fed.server.forward(fed.clients[0].forward(1, images, labels))
    with pytest.raises(ProtocolError, match="unfinished"):
        fed.server.end_round()


def test_end_round_before_every_client_finished_is_rejected(fed) -> None:
    server = fed.server
    before = {name: tensor.data.copy() for name, tensor in server.encoder.items()}
    images, labels = fed.clients[0].next_batch()
    _exchange(fed, 0, images, labels)

    with pytest.raises(ProtocolError, match=r"clients \[1, 2\]"):
        server.end_round()

    for name, tensor in server.encoder.items():
        assert np.array_equal(tensor.data, before[name]), name
    for k in (1, 2):
        images, labels = fed.clients[k].next_batch()
        _exchange(fed, k, images, labels)
    assert server.end_round()[0] == 3


def test_end_round_prunes_per_round_state(fed) -> None:
    server = fed.server
    for k in range(3):
        images, labels = fed.clients[k].next_batch()
        _exchange(fed, k, images, labels)
    assert len(server._seen) == 3 and len(server._blocks) == 3

    server.end_round()

    assert server._seen == set() and server._blocks == {} and server._finished == set()
    assert server.last_closed == 1
    for k in range(3):
        images, labels = fed.clients[k].next_batch()
        _exchange(fed, k, images, labels, round_id=2)
    server.end_round()
    assert server.last_closed == 2


def test_request_for_a_closed_round_is_rejected(fed) -> None:
    for k in range(3):
        images, labels = fed.clients[k].next_batch()
        _exchange(fed, k, images, labels)
    fed.server.end_round()
    images, labels = fed.clients[0].next_batch()
    with pytest.raises(ProtocolError, match="after round 1 closed"):
        fed.server.forward(fed.clients[0].forward(1, images, labels))


def test_token_batch_of_the_wrong_shape_is_rejected(fed) -> None:
    config = fed.server.model_config
    tokens = np.zeros((2, config.tokens + 1, config.dim))
    with pytest.raises(ProtocolError, match="token batch of shape"):
        fed.server.forward(ProtocolMessage(MessageKind.TOKEN_BATCH, 1, 0, "1-0-0", {TOKENS: tokens}))
    assert not fed.server.has_cached("1-0-0")


def test_request_from_an_unknown_client_is_rejected(fed) -> None:
    config = fed.server.model_config
    tokens = np.zeros((2, config.tokens, config.dim))
    with pytest.raises(ProtocolError, match="unknown client"):
        fed.server.forward(ProtocolMessage(MessageKind.TOKEN_BATCH, 1, 3, "1-3-0", {TOKENS: tokens}))


def test_zero_token_gradient_leaves_tokenizer_unchanged(fed) -> None:
    client, server = fed.clients[0], fed.server
    images, labels = client.next_batch()
    token_batch = client.forward(1, images, labels)
    token_grad = server.backward(client.loss_and_backward(server.forward(token_batch)))
    zero = ProtocolMessage(
        token_grad.kind, token_grad.round_id, token_grad.client_id, token_grad.request_id,
        {TOKENS_GRAD: np.zeros_like(token_grad.tensor(TOKENS_GRAD))})
    before = {name: tensor.data.copy() for name, tensor in client.tokenizer.items()}

    client.backward(zero)

    for name, tensor in client.tokenizer.items():
        assert np.array_equal(tensor.data, before[name]), name
    assert not client.busy
    client.forward(2, images, labels)


def test_token_gradient_for_unknown_request_is_rejected(fed) -> None:
    client = fed.clients[0]
    images, labels = client.next_batch()
    token_batch = client.forward(1, images, labels)
    stray = ProtocolMessage(
        MessageKind.TOKEN_GRAD, 1, 0, "9-9-9", {TOKENS_GRAD: np.zeros_like(token_batch.tensor(TOKENS))})
    with pytest.raises(ProtocolError, match="no outstanding request"):
        client.backward(stray)


def test_tokenizer_update_matches_monolithic_update(fed) -> None:
    _stub_blocks(fed.server, [4])
    client = fed.clients[2]
    images, labels = client.next_batch()
    reference = _monolithic(fed, 2, images, labels, 4)
    optimizer_settings(tiny_experiment(protocol={"weight_decay": 0.0})).build(reference.tokenizer).step()

    _, loss = _exchange(fed, 2, images, labels)

    assert loss == reference.loss
    for name, tensor in client.tokenizer.items():
        np.testing.assert_allclose(tensor.data, reference.tokenizer[name].data, rtol=0, atol=1e-12)
