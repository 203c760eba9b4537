"""Single-graph replay of the split training schedule.

Every client visit runs tokenizer, encoder prefix, adapter, head and loss in
one graph. The update schedule matches the split protocol: head, adapter and
tokenizer step per visit, the encoder steps once per round on per-block
averaged gradients, and tokenizer and head are averaged on unifying rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.autodiff import ops
from app.autodiff.tensor import Graph, Tensor
from app.config import ExperimentConfig
from app.data.dataset import DomainDataset
from app.model.adapter import adapt
from app.model.bundle import ModelBundle, clone_params, init_bundle
from app.model.encoder import block_of, encode_prefix
from app.model.head import classify
from app.model.tokenizer import tokenize
from app.protocol.seeding import STREAM_CLIENT, STREAM_INIT, BatchCursor, stream
from app.protocol.training import build_sampler, optimizer_settings, unification_due

ParamSet = Dict[str, Tensor]


@dataclass
class OracleResult:
    bundle: ModelBundle
    tokenizers: List[ParamSet]
    heads: List[ParamSet]
    steps: List[Tuple[int, int, int, float]] = field(default_factory=list)


def _average_into(param_sets: Sequence[ParamSet], weights: np.ndarray) -> None:
    for name in param_sets[0]:
        total = weights[0] * param_sets[0][name].data
        for weight, params in zip(weights[1:], param_sets[1:]):
            total = total + weight * params[name].data
        for params in param_sets:
            params[name].data = total.copy()


def replay_fedsis(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> OracleResult:
    model = config.model
    protocol = config.protocol
    bundle = init_bundle(model, stream(seed, STREAM_INIT))
    settings = optimizer_settings(config)
    sampler = build_sampler(config, seed)
    batch_sizes = protocol.batch_sizes(len(datasets))

    tokenizers = [clone_params(bundle.tokenizer) for _ in datasets]
    heads = [clone_params(bundle.head) for _ in datasets]
    cursors = [
        BatchCursor(len(dataset), batch_sizes[k], stream(seed, STREAM_CLIENT, k))
        for k, dataset in enumerate(datasets)]
    tokenizer_opts = [settings.build(params) for params in tokenizers]
    head_opts = [settings.build(params) for params in heads]
    encoder_opt = settings.build(bundle.encoder)
    adapter_opt = settings.build(bundle.adapter)
    counts = np.asarray([len(dataset) for dataset in datasets], dtype=np.float64)
    weights = counts / counts.sum()

    steps: List[Tuple[int, int, int, float]] = []
    for round_id in range(1, protocol.rounds + 1):
        summed: Dict[str, np.ndarray] = {}
        contributors: Dict[int, int] = {}
        for k, dataset in enumerate(datasets):
            indices = cursors[k].next_indices()
            images, labels = dataset.images[indices], dataset.labels[indices]
            block = sampler.sample()
            with Graph() as graph:
                tokens = tokenize(tokenizers[k], images, model)
                patches, _ = encode_prefix(bundle.encoder, tokens, block, model)
                features = adapt(bundle.adapter, bundle.adapter_stats, patches, True, model)
                loss = ops.cross_entropy(classify(heads[k], features), labels)
            graph.backward(loss)
            for optimizer in (head_opts[k], adapter_opt, tokenizer_opts[k]):
                optimizer.step()
                optimizer.zero_grad()
            for name, tensor in bundle.encoder.items():
                if tensor.grad is not None:
                    summed[name] = tensor.grad.copy() if name not in summed else summed[name] + tensor.grad
                tensor.grad = None
            for depth in range(block + 1):
                contributors[depth] = contributors.get(depth, 0) + 1
            steps.append((round_id, k, block, float(loss.data)))

        for name, tensor in bundle.encoder.items():
            count = contributors.get(block_of(name), 0)
            tensor.grad = summed[name] / count if count and name in summed else None
        encoder_opt.step()
        encoder_opt.zero_grad()

        if unification_due(round_id, protocol.r_uni, protocol.rounds):
            _average_into(tokenizers, weights)
            _average_into(heads, weights)

    bundle.tokenizer = tokenizers[0]
    bundle.head = heads[0]
    return OracleResult(bundle, tokenizers, heads, steps)


__all__ = ["OracleResult", "replay_fedsis"]
