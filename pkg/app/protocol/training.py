"""Round-based training for every mode, with strict and concurrent schedulers."""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..autodiff.tensor import precision
from ..config import ExperimentConfig
from ..data.dataset import DomainDataset
from ..model.bundle import ModelBundle, clone_params, init_bundle
from ..model.sampler import BlockSampler
from .aggregation import fedavg, rho_weights, unify
from .client import FedClient, OptimizerSettings
from .local import LocalModel
from .messages import MessageKind, ProtocolMessage
from .seeding import STREAM_CLIENT, STREAM_INIT, STREAM_SAMPLER, STREAM_VISIT, stream
from .server import FedServer
from .transport import Transport

LOGGER = logging.getLogger(__name__)

SPLIT_MODES = ("fedsis", "festa")
CLS_PATH_MODES = ("festa", "fedavg", "centralized")


class TrainingAborted(RuntimeError):
    """A sub-operation failed; carries the round and client where it happened."""

    def __init__(self, message: str, round_id: Optional[int] = None, client_id: Optional[int] = None) -> None:
        super().__init__(f"training aborted at round={round_id} client={client_id}: {message}")
        self.round_id = round_id
        self.client_id = client_id


@dataclass
class RoundRecord:
    round: int
    client: int
    block: int
    loss: float
    fwd_bytes: int = 0
    bwd_bytes: int = 0
    unify_bytes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainingResult:
    mode: str
    bundle: ModelBundle
    round_log: List[RoundRecord] = field(default_factory=list)
    total_bytes: int = 0

    def write_round_log(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(record.to_json() + "\n" for record in self.round_log), encoding="utf-8")
        return target


@dataclass
class Federation:
    """Live split-learning state: one server, K clients and the transport between them."""

    server: FedServer
    clients: List[FedClient]
    transport: Transport
    weights: np.ndarray

    def bundle(self) -> ModelBundle:
        lead = self.clients[0]
        return ModelBundle(
            config=self.server.model_config,
            tokenizer=lead.tokenizer,
            encoder=self.server.encoder,
            adapter=self.server.adapter,
            adapter_stats=self.server.adapter_stats,
            head=lead.head,
        )


def unification_due(round_id: int, r_uni: int, rounds: int) -> bool:
    return round_id % r_uni == 0 or round_id == rounds


def optimizer_settings(config: ExperimentConfig) -> OptimizerSettings:
    protocol = config.protocol
    return OptimizerSettings(
        lr=protocol.lr,
        betas=(protocol.adam_betas[0], protocol.adam_betas[1]),
        eps=protocol.adam_eps,
        weight_decay=protocol.weight_decay,
    )


def build_sampler(config: ExperimentConfig, seed: int) -> BlockSampler:
    model = config.model
    low, high = model.sampler_bounds
    return BlockSampler(low, high, stream(seed, STREAM_SAMPLER), model.sampler_mode, model.fixed_block)


def init_and_broadcast(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> Federation:
    """Initialise the server and broadcast one tokenizer and head to every client."""

    bundle = init_bundle(config.model, stream(seed, STREAM_INIT))
    settings = optimizer_settings(config)
    transport = Transport()
    server = FedServer(
        bundle.encoder, bundle.adapter, bundle.adapter_stats, build_sampler(config, seed),
        config.model, settings, num_clients=len(datasets),
        cls_path=config.protocol.mode == "festa",
        encoder_divisor=config.protocol.encoder_divisor)
    batch_sizes = config.protocol.batch_sizes(len(datasets))
    payload = {f"tokenizer.{n}": t.data for n, t in bundle.tokenizer.items()}
    payload.update({f"head.{n}": t.data for n, t in bundle.head.items()})

    clients = []
    for k, dataset in enumerate(datasets):
        message = transport.deliver(ProtocolMessage(
            MessageKind.PARAM_BROADCAST, 0, k, f"0-{k}-init", {n: a.copy() for n, a in payload.items()}))
        client = FedClient(
            k, clone_params(bundle.tokenizer), clone_params(bundle.head), dataset, batch_sizes[k],
            stream(seed, STREAM_CLIENT, k), config.model, settings)
        client.apply_broadcast(message)
        clients.append(client)
    weights = rho_weights([len(d) for d in datasets], config.protocol.rho)
    LOGGER.info(
        "Initialised %d clients (rho=%s)", len(clients), np.array2string(weights, precision=4))
    return Federation(server, clients, transport, weights)


def _visit_order(count: int, policy: str, rng: np.random.Generator) -> List[int]:
    if policy == "shuffled":
        return [int(k) for k in rng.permutation(count)]
    return list(range(count))


def _split_exchange(fed: Federation, client: FedClient, round_id: int) -> RoundRecord:
    transport, server = fed.transport, fed.server
    images, labels = client.next_batch()
    token_batch = transport.deliver(client.forward(round_id, images, labels))
    pseudo_batch = transport.deliver(server.forward(token_batch))
    pseudo_grad = transport.deliver(client.loss_and_backward(pseudo_batch))
    token_grad = transport.deliver(server.backward(pseudo_grad))
    loss = client.backward(token_grad)
    return RoundRecord(
        round_id, client.client_id, server.block_for(round_id, client.client_id), loss,
        fwd_bytes=token_batch.payload_bytes + pseudo_batch.payload_bytes,
        bwd_bytes=pseudo_grad.payload_bytes + token_grad.payload_bytes)


async def _concurrent_round(fed: Federation, round_id: int, order: Sequence[int]) -> List[RoundRecord]:
    """Clients run as tasks; one server loop handles requests in arrival order."""

    loop = asyncio.get_running_loop()
    queue: asyncio.Queue = asyncio.Queue()
    transport, server = fed.transport, fed.server

    async def serve() -> None:
        while True:
            item = await queue.get()
            if item is None:
                return
            message, reply = item
            try:
                received = transport.deliver(message)
                handler = server.forward if received.kind is MessageKind.TOKEN_BATCH else server.backward
                reply.set_result(transport.deliver(handler(received)))
            except Exception as exc:  # surfaced to the waiting client
                reply.set_exception(exc)

    async def call(message: ProtocolMessage) -> ProtocolMessage:
        reply = loop.create_future()
        await queue.put((message, reply))
        return await reply

    async def run_client(k: int) -> RoundRecord:
        client = fed.clients[k]
        try:
            images, labels = client.next_batch()
            token_batch = client.forward(round_id, images, labels)
            pseudo_batch = await call(token_batch)
            pseudo_grad = client.loss_and_backward(pseudo_batch)
            token_grad = await call(pseudo_grad)
            loss = client.backward(token_grad)
        except TrainingAborted:
            raise
        except Exception as exc:
            raise TrainingAborted(str(exc), round_id, k) from exc
        return RoundRecord(
            round_id, k, server.block_for(round_id, k), loss,
            fwd_bytes=token_batch.payload_bytes + pseudo_batch.payload_bytes,
            bwd_bytes=pseudo_grad.payload_bytes + token_grad.payload_bytes)

    server_task = asyncio.create_task(serve())
    try:
        return list(await asyncio.gather(*(run_client(k) for k in order)))
    finally:
        await queue.put(None)
        await server_task


def _train_split(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> TrainingResult:
    protocol = config.protocol
    fed = init_and_broadcast(config, datasets, seed)
    visit_rng = stream(seed, STREAM_VISIT)
    log: List[RoundRecord] = []
    for round_id in range(1, protocol.rounds + 1):
        order = _visit_order(len(fed.clients), protocol.visit_order, visit_rng)
        if protocol.scheduling == "concurrent":
            records = asyncio.run(_concurrent_round(fed, round_id, order))
        else:
            records = []
            for k in order:
                try:
                    records.append(_split_exchange(fed, fed.clients[k], round_id))
                except Exception as exc:
                    raise TrainingAborted(str(exc), round_id, k) from exc
        try:
            fed.server.end_round()
            if unification_due(round_id, protocol.r_uni, protocol.rounds):
                per_client = unify(
                    fed.clients, fed.weights, fed.transport, round_id, protocol.reset_moments_on_unify)
                by_client = {record.client: record for record in records}
                for k, size in enumerate(per_client):
                    by_client[k].unify_bytes = size
        except TrainingAborted:
            raise
        except Exception as exc:
            raise TrainingAborted(str(exc), round_id) from exc
        records.sort(key=lambda record: record.client)
        log.extend(records)
        LOGGER.info(
            "Round %d/%d done: mean loss %.4f blocks %s", round_id, protocol.rounds,
            float(np.mean([r.loss for r in records])), [r.block for r in records])
    return TrainingResult(protocol.mode, fed.bundle(), log, fed.transport.total_bytes)


def _param_message(kind: MessageKind, round_id: int, client_id: int, arrays: Dict[str, np.ndarray]) -> ProtocolMessage:
    return ProtocolMessage(kind, round_id, client_id, f"{round_id}-{client_id}-{kind.value}", arrays)


def _train_fedavg(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> TrainingResult:
    protocol = config.protocol
    initial = init_bundle(config.model, stream(seed, STREAM_INIT))
    settings = optimizer_settings(config)
    batch_sizes = protocol.batch_sizes(len(datasets))
    transport = Transport()
    models = [
        LocalModel(k, initial.clone(), dataset, batch_sizes[k], stream(seed, STREAM_CLIENT, k), settings)
        for k, dataset in enumerate(datasets)]
    weights = rho_weights([len(d) for d in datasets], protocol.rho)
    visit_rng = stream(seed, STREAM_VISIT)
    log: List[RoundRecord] = []
    for round_id in range(1, protocol.rounds + 1):
        records = {}
        for k in _visit_order(len(models), protocol.visit_order, visit_rng):
            try:
                loss, block = models[k].train_step()
            except Exception as exc:
                raise TrainingAborted(str(exc), round_id, k) from exc
            records[k] = RoundRecord(round_id, k, block, loss)
        if unification_due(round_id, protocol.r_uni, protocol.rounds):
            uploads = [
                transport.deliver(_param_message(MessageKind.PARAM_UPLOAD, round_id, k, model.arrays()))
                for k, model in enumerate(models)]
            averaged = fedavg([message.payload for message in uploads], weights)
            for k, model in enumerate(models):
                broadcast = transport.deliver(_param_message(
                    MessageKind.PARAM_BROADCAST, round_id, k, {n: a.copy() for n, a in averaged.items()}))
                model.load(dict(broadcast.payload), protocol.reset_moments_on_unify)
                records[k].unify_bytes = uploads[k].payload_bytes + broadcast.payload_bytes
        log.extend(records[k] for k in sorted(records))
        LOGGER.info("Round %d/%d done (fedavg)", round_id, protocol.rounds)
    return TrainingResult(protocol.mode, models[0].bundle, log, transport.total_bytes)


def _train_centralized(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> TrainingResult:
    protocol = config.protocol
    bundle = init_bundle(config.model, stream(seed, STREAM_INIT))
    pooled = DomainDataset.concat(list(datasets))
    sampler = build_sampler(config, seed) if protocol.mode == "centralized_is" else None
    model = LocalModel(
        0, bundle, pooled, sum(protocol.batch_sizes(len(datasets))), stream(seed, STREAM_CLIENT, 0),
        optimizer_settings(config), sampler)
    log: List[RoundRecord] = []
    for round_id in range(1, protocol.rounds + 1):
        try:
            loss, block = model.train_step()
        except Exception as exc:
            raise TrainingAborted(str(exc), round_id, 0) from exc
        log.append(RoundRecord(round_id, 0, block, loss))
        LOGGER.info("Round %d/%d done (%s): loss %.4f", round_id, protocol.rounds, protocol.mode, loss)
    return TrainingResult(protocol.mode, bundle, log, 0)


def run_training(config: ExperimentConfig, datasets: Sequence[DomainDataset], seed: int) -> TrainingResult:
    """Run ``config.protocol.rounds`` rounds of the configured mode on the client datasets."""

    if not datasets:
        raise TrainingAborted("no client datasets")
    mode = config.protocol.mode
    LOGGER.info(
        "Training mode=%s clients=%d rounds=%d r_uni=%d seed=%d",
        mode, len(datasets), config.protocol.rounds, config.protocol.r_uni, seed)
    with precision(config.protocol.precision):
        if mode in SPLIT_MODES:
            return _train_split(config, datasets, seed)
        if mode == "fedavg":
            return _train_fedavg(config, datasets, seed)
        return _train_centralized(config, datasets, seed)


__all__ = [
    "CLS_PATH_MODES",
    "Federation",
    "RoundRecord",
    "SPLIT_MODES",
    "TrainingAborted",
    "TrainingResult",
    "build_sampler",
    "init_and_broadcast",
    "optimizer_settings",
    "run_training",
    "unification_due",
]
