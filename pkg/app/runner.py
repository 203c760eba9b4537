"""Experiment orchestration: data, training, scoring and on-disk artifacts."""

from __future__ import annotations

import csv
import copy
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import serialization
from .config import ConfigError, ExperimentConfig, apply_override, config_from_mapping, valid_keys
from .data.datafile import dump_dataset, load_dataset
from .data.dataset import DomainDataset, split_groups
from .data.partition import PartitionPlan, leave_one_out, split_by_attack
from .data.synthetic import generate_domains, make_domain_specs
from .metrics import MetricsRecord, ScoreSet, aggregate_runs, evaluate, group_average, write_metrics_csv, write_summary_csv
from .model.bundle import ModelBundle
from .protocol.inference import InferencePolicy, infer_with_features
from .protocol.seeding import STREAM_INFERENCE, stream
from .protocol.training import CLS_PATH_MODES, TrainingResult, run_training

LOGGER = logging.getLogger(__name__)

STREAM_DEV_SPLIT = 5
STREAM_DEV_INFERENCE = 6


@dataclass
class SeedOutcome:
    seed: int
    record: MetricsRecord
    result: TrainingResult
    scores: np.ndarray
    artifacts: List[Path] = field(default_factory=list)


@dataclass
class RunOutcome:
    run_dir: Path
    outcomes: List[SeedOutcome]
    artifacts: List[Path]

    @property
    def records(self) -> List[MetricsRecord]:
        return [outcome.record for outcome in self.outcomes]


def build_domains(config: ExperimentConfig) -> List[DomainDataset]:
    data, model = config.data, config.model
    if data.source == "file":
        domains = [load_dataset(path) for path in data.paths]
        for path, dataset in zip(data.paths, domains):
            if list(dataset.image_shape) != list(model.image_shape):
                raise ConfigError(
                    "data.paths",
                    f"{path} holds images of shape {dataset.image_shape}, model expects {model.image_shape}")
        return domains
    specs = make_domain_specs(
        data.num_domains, data.seed, model.image_shape,
        noise=data.noise,
        style_strength=data.style_strength,
        style_shifts=data.style_shifts,
        spurious_strength=data.spurious_strength,
        bonafide_count=data.bonafide_per_domain,
        attack_count=data.attacks_per_type,
        frames_per_group=data.frames_per_group)
    return generate_domains(specs, data.amplitude, data.seed)


def build_partition(config: ExperimentConfig, domains: Optional[Sequence[DomainDataset]] = None) -> PartitionPlan:
    domains = list(domains) if domains is not None else build_domains(config)
    plan = leave_one_out(domains, config.data.target)
    if config.data.split_by_attack:
        plan = split_by_attack(plan)
    return plan


def inference_policy(config: ExperimentConfig) -> InferencePolicy:
    """The eval policy; a fixed-block sampler forces the same fixed block at inference."""

    model, evaluation = config.model, config.eval
    kind, block = evaluation.inference_policy, evaluation.fixed_block
    if model.sampler_mode == "fixed":
        kind, block = "fixed", model.fixed_block
    low, high = model.sampler_bounds
    return InferencePolicy(
        kind=kind,
        granularity=evaluation.granularity,
        fixed_block=block,
        draws=evaluation.average_draws,
        low=low,
        high=high,
        cls_path=config.protocol.mode in CLS_PATH_MODES,
    )


def score_dataset(
        config: ExperimentConfig,
        bundle: ModelBundle,
        dataset: DomainDataset,
        rng: np.random.Generator) -> Tuple[ScoreSet, np.ndarray, np.ndarray]:
    """Sample-level scores and features plus the (optionally group-averaged) score set."""

    scores, features = infer_with_features(
        bundle, dataset.images, inference_policy(config), rng,
        config.eval.batch_size, config.protocol.precision)
    score_set = ScoreSet(scores, dataset.labels, dataset.groups)
    if config.eval.group_average:
        score_set = group_average(score_set)
    return score_set, scores, features


def _dev_split(config: ExperimentConfig, clients: Sequence[DomainDataset], seed: int):
    rng = stream(seed, STREAM_DEV_SPLIT)
    train, dev = [], []
    for client in clients:
        remaining, held = split_groups(client, config.eval.dev_fraction, rng)
        train.append(remaining)
        dev.append(held)
    return train, DomainDataset.concat(dev)


def run_seed(config: ExperimentConfig, plan: PartitionPlan, seed: int, seed_dir: Path) -> SeedOutcome:
    clients: Sequence[DomainDataset] = plan.clients
    dev_scores = None
    dev_set = None
    if config.eval.threshold_policy == "dev":
        clients, dev_set = _dev_split(config, clients, seed)

    result = run_training(config, clients, seed)
    if dev_set is not None:
        dev_scores, _, _ = score_dataset(config, result.bundle, dev_set, stream(seed, STREAM_DEV_INFERENCE))
    score_set, scores, features = score_dataset(config, result.bundle, plan.target, stream(seed, STREAM_INFERENCE))
    record = evaluate(
        score_set, config.protocol.mode, seed, config.data.target, result.total_bytes,
        policy=config.eval.threshold_policy,
        fpr_target=config.eval.fpr_target,
        interpolate=config.eval.interpolate_tpr,
        dev=dev_scores)

    artifacts = [
        result.write_round_log(seed_dir / "round_log.jsonl"),
        result.bundle.save(seed_dir / "checkpoint.fsis"),
    ]
    if config.eval.dump_features:
        artifacts.append(write_features(seed_dir / "features.npz", features, scores, plan.target))
    return SeedOutcome(seed, record, result, scores, artifacts)


def write_features(path: Path, features: np.ndarray, scores: np.ndarray, dataset: DomainDataset) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(
            handle, features=features, scores=scores, labels=dataset.labels,
            domains=dataset.domains, attacks=dataset.attacks, groups=dataset.groups)
    return path


def run_experiment(config: ExperimentConfig, run_dir: Optional[Path] = None) -> RunOutcome:
    """Train and evaluate every seed; write the promised artifacts under ``run_dir``."""

    run_dir = Path(run_dir) if run_dir is not None else Path(config.output_dir) / config.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [config.dump(run_dir / "config.yaml")]
    plan = build_partition(config)
    LOGGER.info(
        "Run %s: mode=%s target=%d clients=%d seeds=%s",
        config.run_name, config.protocol.mode, config.data.target, plan.num_clients, config.seeds)

    outcomes = []
    for seed in config.seeds:
        outcome = run_seed(config, plan, seed, run_dir / f"seed_{seed}")
        outcomes.append(outcome)
        artifacts.extend(outcome.artifacts)
    records = [outcome.record for outcome in outcomes]
    artifacts.append(write_metrics_csv(run_dir / "metrics.csv", records))
    artifacts.append(write_summary_csv(run_dir / "summary.csv", records))
    for path in artifacts:
        allowed_empty = config.protocol.rounds == 0 and path.name == "round_log.jsonl"
        if not path.exists() or (path.stat().st_size == 0 and not allowed_empty):
            raise RuntimeError(f"artifact {path} is missing or empty")
    return RunOutcome(run_dir, outcomes, artifacts)


def _value_label(value: Any) -> str:
    text = str(value).replace(" ", "")
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", text).strip("_") or "value"


def sweep(config: ExperimentConfig, axis: str, values: Sequence[Any]) -> Tuple[Path, Path]:
    """One run per value of the dotted key ``axis``; returns the comparison and summary CSV paths."""

    keys = valid_keys()
    if axis not in keys:
        raise ConfigError(axis, f"invalid sweep axis; valid axes are {keys}")
    if not values:
        raise ConfigError(axis, "sweep needs at least one value")
    base_dir = Path(config.output_dir) / config.run_name
    base = config.to_dict()
    rows: List[Tuple[Any, MetricsRecord]] = []
    for value in values:
        raw = copy.deepcopy(base)
        apply_override(raw, axis, value)
        variant = config_from_mapping(raw)
        outcome = run_experiment(variant, base_dir / f"sweep_{axis}" / _value_label(value))
        rows.extend((value, record) for record in outcome.records)

    comparison = base_dir / f"sweep_{axis}.csv"
    comparison.parent.mkdir(parents=True, exist_ok=True)
    _write_sweep_rows(comparison, axis, rows)
    summary = base_dir / f"sweep_{axis}_summary.csv"
    _write_sweep_summary(summary, axis, values, rows)
    LOGGER.info("Sweep over %s finished: %d rows", axis, len(rows))
    return comparison, summary


def _write_sweep_rows(path: Path, axis: str, rows: Sequence[Tuple[Any, MetricsRecord]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = None
        for value, record in rows:
            row = {"axis": axis, "value": str(value), **record.row()}
            if writer is None:
                writer = csv.DictWriter(handle, fieldnames=list(row), lineterminator="\n")
                writer.writeheader()
            writer.writerow(row)


def _write_sweep_summary(path: Path, axis: str, values: Sequence[Any],
                         rows: Sequence[Tuple[Any, MetricsRecord]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["axis", "value", "hter_mean", "hter_std", "auc_mean", "auc_std",
                         "tpr_at_fpr_mean", "tpr_at_fpr_std", "n"])
        for value in values:
            records = [record for v, record in rows if v == value]
            stats = aggregate_runs(records)
            writer.writerow([
                axis, str(value),
                f"{stats['hter']['mean']:.6f}", f"{stats['hter']['std']:.6f}",
                f"{stats['auc']['mean']:.6f}", f"{stats['auc']['std']:.6f}",
                f"{stats['tpr_at_fpr']['mean']:.6f}", f"{stats['tpr_at_fpr']['std']:.6f}",
                len(records)])


def dump_features(config: ExperimentConfig, checkpoint: Path, output: Path, seed: int = 0) -> Path:
    """Score the target domain with a saved bundle and write its pre-head features."""

    bundle = ModelBundle.load(checkpoint, config.model)
    plan = build_partition(config)
    _, scores, features = score_dataset(config, bundle, plan.target, stream(seed, STREAM_INFERENCE))
    return write_features(output, features, scores, plan.target)


def gen_data(config: ExperimentConfig, output_dir: Path) -> List[Path]:
    """Write every configured synthetic domain as an FSDS file."""

    paths = []
    for dataset in build_domains(config):
        domain = dataset.domain_ids[0]
        paths.append(dump_dataset(Path(output_dir) / f"domain{domain}.fsds", dataset))
    return paths


def inspect_checkpoint(path: Path) -> List[Tuple[str, Tuple[int, ...], int]]:
    arrays = serialization.load(path)
    return [(name, tuple(array.shape), int(array.size)) for name, array in arrays.items()]


__all__ = [
    "RunOutcome",
    "SeedOutcome",
    "build_domains",
    "build_partition",
    "dump_features",
    "gen_data",
    "inference_policy",
    "inspect_checkpoint",
    "run_experiment",
    "run_seed",
    "score_dataset",
    "sweep",
    "write_features",
]
