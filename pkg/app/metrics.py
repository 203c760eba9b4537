"""Score-based evaluation: HTER, AUC, TPR at a fixed FPR and multi-seed aggregation.

Bonafide (label 1) is the positive class. A sample is accepted when its
score is ``>= threshold``; FAR is the fraction of attacks accepted and FRR
the fraction of bonafide rejected. FPR equals FAR and TPR equals ``1 - FRR``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

LOGGER = logging.getLogger(__name__)

METRICS_COLUMNS = ("mode", "seed", "target_domain", "hter", "auc", "tpr_at_fpr", "threshold", "policy", "total_bytes")
SUMMARY_METRICS = ("hter", "auc", "tpr_at_fpr", "total_bytes")


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        if self.groups is not None:
            object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64))
            if len(self.groups) != len(scores):
                raise ValueError("groups must be parallel to scores")
        if scores.ndim != 1 or scores.shape != labels.shape:
            raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be parallel 1-D arrays")
        if scores.size == 0:
            raise ValueError("score set is empty")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 (attack) or 1 (bonafide)")

    @property
    def bonafide(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def attack(self) -> np.ndarray:
        return self.scores[self.labels == 0]

    def require_both_classes(self, metric: str) -> None:
        if not (np.any(self.labels == 1) and np.any(self.labels == 0)):
            raise ValueError(f"{metric} needs both bonafide and attack samples")


@dataclass
class MetricsRecord:
    mode: str
    seed: Union[int, str]
    target_domain: int
    hter: float
    auc: float
    tpr_at_fpr: float
    threshold: float
    policy: str
    total_bytes: int
    fpr_target: float = 0.01

    def __post_init__(self) -> None:
        for name in ("hter", "auc", "tpr_at_fpr"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name}={value} outside [0, 100]")

    def row(self) -> Dict[str, str]:
        values = asdict(self)
        return {column: _format(values[column]) for column in METRICS_COLUMNS}


def _format(value: object) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.6f}"
    return str(value)


def group_average(scores: ScoreSet) -> ScoreSet:
    """One score per group: the mean of its members."""

    if scores.groups is None:
        raise ValueError("group_average needs group ids")
    unique, inverse = np.unique(scores.groups, return_inverse=True)
    counts = np.bincount(inverse)
    means = np.bincount(inverse, weights=scores.scores) / counts
    label_sum = np.bincount(inverse, weights=scores.labels)
    if np.any((label_sum != 0) & (label_sum != counts)):
        mixed = unique[(label_sum != 0) & (label_sum != counts)]
        raise ValueError(f"groups with mixed labels: {mixed.tolist()}")
    return ScoreSet(means, (label_sum > 0).astype(np.int64), unique)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """The minimum score, midpoints between distinct scores, and ``+inf``, ascending."""

    distinct = np.unique(scores)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([distinct[0]], midpoints, [np.inf]))


def error_rates(scores: ScoreSet, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """FAR and FRR at each threshold."""

    attack = np.sort(scores.attack)
    bonafide = np.sort(scores.bonafide)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    accepted_attacks = attack.size - np.searchsorted(attack, thresholds, side="left")
    rejected_bonafide = np.searchsorted(bonafide, thresholds, side="left")
    return accepted_attacks / attack.size, rejected_bonafide / bonafide.size


def select_threshold(scores: ScoreSet, policy: str = "eer", dev: Optional[ScoreSet] = None) -> float:
    """Threshold for ``eer``, ``min_hter``, ``fixed:<tau>`` or ``dev`` (EER on ``dev``)."""

    if policy.startswith("fixed:"):
        return float(policy.split(":", 1)[1])
    if policy == "dev":
        if dev is None:
            raise ValueError("dev threshold policy needs a development score set")
        return select_threshold(dev, "eer")
    scores.require_both_classes("threshold selection")
    thresholds = candidate_thresholds(scores.scores)
    far, frr = error_rates(scores, thresholds)
    if policy == "eer":
        index = int(np.argmin(np.abs(far - frr)))
    elif policy == "min_hter":
        index = int(np.argmin((far + frr) / 2.0))
    else:
        raise ValueError(f"unknown threshold policy '{policy}'")
    return float(thresholds[index])


def hter(scores: ScoreSet, policy: str = "eer", dev: Optional[ScoreSet] = None) -> Tuple[float, float]:
    """``(HTER percent, threshold)``."""

    scores.require_both_classes("HTER")
    threshold = select_threshold(scores, policy, dev)
    far, frr = error_rates(scores, np.asarray([threshold]))
    return float((far[0] + frr[0]) / 2.0 * 100.0), threshold


def auc(scores: ScoreSet) -> float:
    """Probability in percent that a bonafide outscores an attack; ties count one half."""

    scores.require_both_classes("AUC")
    attack = np.sort(scores.attack)
    bonafide = scores.bonafide
    below = np.searchsorted(attack, bonafide, side="left")
    at_or_below = np.searchsorted(attack, bonafide, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(100.0 * wins / (attack.size * bonafide.size))


def tpr_at_fpr(scores: ScoreSet, fpr_target: float = 0.01, interpolate: bool = False) -> float:
    """Best TPR percent among thresholds with FPR <= ``fpr_target``."""

    scores.require_both_classes("TPR@FPR")
    thresholds = candidate_thresholds(scores.scores)
    far, frr = error_rates(scores, thresholds)
    tpr = 1.0 - frr
    if interpolate:
        unique_far = np.unique(far)
        best = np.asarray([tpr[far == value].max() for value in unique_far])
        return float(100.0 * np.interp(fpr_target, unique_far, best))
    feasible = far <= fpr_target
    return float(100.0 * tpr[feasible].max())


def evaluate(
        scores: ScoreSet,
        mode: str,
        seed: Union[int, str],
        target_domain: int,
        total_bytes: int,
        policy: str = "eer",
        fpr_target: float = 0.01,
        interpolate: bool = False,
        dev: Optional[ScoreSet] = None) -> MetricsRecord:
    value, threshold = hter(scores, policy, dev)
    record = MetricsRecord(
        mode=mode,
        seed=seed,
        target_domain=target_domain,
        hter=value,
        auc=auc(scores),
        tpr_at_fpr=tpr_at_fpr(scores, fpr_target, interpolate),
        threshold=threshold,
        policy=policy,
        total_bytes=int(total_bytes),
        fpr_target=fpr_target,
    )
    LOGGER.info(
        "Metrics mode=%s seed=%s target=%d: HTER %.2f AUC %.2f TPR@FPR=%g %.2f (tau=%s, %s)",
        mode, seed, target_domain, record.hter, record.auc, fpr_target, record.tpr_at_fpr,
        _format(threshold), policy)
    return record


def aggregate_runs(records: Sequence[Union[MetricsRecord, Mapping[str, float]]],
                   metrics: Sequence[str] = SUMMARY_METRICS) -> Dict[str, Dict[str, float]]:
    """Per-metric mean and sample standard deviation (``n - 1``; 0 when n is 1)."""

    if not records:
        raise ValueError("aggregate_runs needs at least one record")
    rows = [asdict(r) if isinstance(r, MetricsRecord) else dict(r) for r in records]
    summary: Dict[str, Dict[str, float]] = {}
    for metric in metrics:
        values = np.asarray([float(row[metric]) for row in rows])
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        summary[metric] = {"mean": float(values.mean()), "std": std, "n": float(values.size)}
    return summary


def mean_record(records: Sequence[MetricsRecord]) -> Dict[str, str]:
    """The ``seed=mean`` row appended under the per-seed rows."""

    summary = aggregate_runs(records)
    first = records[0]
    thresholds = {r.threshold for r in records}
    return {
        "mode": first.mode,
        "seed": "mean",
        "target_domain": str(first.target_domain),
        "hter": _format(summary["hter"]["mean"]),
        "auc": _format(summary["auc"]["mean"]),
        "tpr_at_fpr": _format(summary["tpr_at_fpr"]["mean"]),
        "threshold": _format(first.threshold) if len(thresholds) == 1 else "",
        "policy": first.policy,
        "total_bytes": str(int(round(summary["total_bytes"]["mean"]))),
    }


def write_metrics_csv(path: Union[str, Path], records: Sequence[MetricsRecord],
                      extra_columns: Optional[Mapping[str, str]] = None,
                      include_mean: bool = True) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    prefix = dict(extra_columns or {})
    columns = list(prefix) + list(METRICS_COLUMNS)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow({**prefix, **record.row()})
        if include_mean and records:
            writer.writerow({**prefix, **mean_record(records)})
    return target


def write_summary_csv(path: Union[str, Path], records: Sequence[MetricsRecord]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    summary = aggregate_runs(records)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric", "mean", "std", "n"])
        for metric, stats in summary.items():
            writer.writerow([metric, _format(stats["mean"]), _format(stats["std"]), int(stats["n"])])
    return target


__all__ = [
    "METRICS_COLUMNS",
    "MetricsRecord",
    "ScoreSet",
    "aggregate_runs",
    "auc",
    "candidate_thresholds",
    "error_rates",
    "evaluate",
    "group_average",
    "hter",
    "mean_record",
    "select_threshold",
    "tpr_at_fpr",
    "write_metrics_csv",
    "write_summary_csv",
]
