"""Experiment configuration for the FedSIS desk-scale lab."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, MutableMapping, Optional, Tuple, Union

import yaml

from .autodiff.ops import conv_output_size
from .autodiff.tensor import PRECISIONS

LOGGER = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "FEDSIS_OUTPUT_DIR"
PRECISION_ENV = "FEDSIS_PRECISION"
LOG_LEVEL_ENV = "LOG_LEVEL"

DEFAULT_OUTPUT_DIR = "runs"

MODES = ("fedsis", "festa", "fedavg", "centralized", "centralized_is")
SAMPLER_MODES = ("uniform", "fixed")
VISIT_ORDERS = ("ascending", "shuffled")
SCHEDULERS = ("strict", "concurrent")
ENCODER_DIVISORS = ("contributors", "clients")
RHO_POLICIES = ("samples", "uniform")
INFERENCE_POLICIES = ("sampled", "fixed", "averaged")
GRANULARITIES = ("batch", "sample")
DATA_SOURCES = ("synthetic", "file")


class ConfigError(ValueError):
    """Raised for invalid experiment configuration; ``key_path`` names the offending key."""

    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
        self.message = message


@dataclass
class ModelConfig:
    image_shape: List[int] = field(default_factory=lambda: [16, 16, 3])
    conv_channels: List[int] = field(default_factory=lambda: [16, 32])
    conv_kernel: int = 3
    conv_strides: List[int] = field(default_factory=lambda: [2, 2])
    conv_padding: int = 1
    dim: int = 32
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    init_std: float = 0.02
    sampler_range: Optional[List[int]] = None
    sampler_mode: str = "uniform"
    fixed_block: Optional[int] = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    ln_eps: float = 1e-6

    @property
    def grid(self) -> Tuple[int, int]:
        height, width = self.image_shape[0], self.image_shape[1]
        for stride in self.conv_strides:
            height = conv_output_size(height, self.conv_kernel, stride, self.conv_padding)
            width = conv_output_size(width, self.conv_kernel, stride, self.conv_padding)
        return height, width

    @property
    def tokens(self) -> int:
        height, width = self.grid
        return height * width

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.tokens)

    def validate(self) -> None:
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError("model.image_shape", f"expected [H, W, C] of positive ints, got {self.image_shape}")
        if len(self.conv_channels) != 2 or len(self.conv_strides) != 2:
            raise ConfigError("model.conv_channels", "the tokenizer has exactly two conv layers")
        if self.depth < 1:
            raise ConfigError("model.depth", "must be >= 1")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError("model.heads", f"dim {self.dim} must be divisible by heads {self.heads}")
        height, width = self.grid
        if height < 1 or width < 1 or height != width or math.isqrt(self.tokens) ** 2 != self.tokens:
            raise ConfigError(
                "model.conv_strides",
                f"token grid {height}x{width} is not square; the adapter needs a square grid")
        low, high = self.sampler_bounds
        if not 1 <= low <= high <= self.depth:
            raise ConfigError(
                "model.sampler_range",
                f"range [{low}, {high}] must be non-empty and inside [1, {self.depth}]")
        if self.sampler_mode not in SAMPLER_MODES:
            raise ConfigError("model.sampler_mode", f"expected one of {SAMPLER_MODES}")
        if self.sampler_mode == "fixed":
            if self.fixed_block is None or not 1 <= self.fixed_block <= self.depth:
                raise ConfigError("model.fixed_block", f"fixed mode needs a block in [1, {self.depth}]")

    @property
    def sampler_bounds(self) -> Tuple[int, int]:
        """``sampler_range`` or ``[1, depth]`` when unset."""
        if self.sampler_range is None:
            return 1, self.depth
        if len(self.sampler_range) != 2:
            raise ConfigError("model.sampler_range", "expected [low, high]")
        return int(self.sampler_range[0]), int(self.sampler_range[1])


@dataclass
class ProtocolConfig:
    mode: Optional[str] = None
    rounds: int = 200
    r_uni: int = 10
    batch_size: Union[int, List[int]] = 8
    lr: float = 1e-3
    weight_decay: float = 1e-6
    adam_betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    precision: str = "float64"
    visit_order: str = "ascending"
    scheduling: str = "strict"
    encoder_divisor: str = "contributors"
    reset_moments_on_unify: bool = False
    rho: str = "samples"

    def batch_sizes(self, clients: int) -> List[int]:
        if isinstance(self.batch_size, int):
            return [self.batch_size] * clients
        if len(self.batch_size) != clients:
            raise ConfigError(
                "protocol.batch_size",
                f"{len(self.batch_size)} batch sizes given for {clients} clients")
        return list(self.batch_size)

    def validate(self) -> None:
        if self.mode is None:
            raise ConfigError("protocol.mode", "is required")
        _check_choice("protocol.mode", self.mode, MODES)
        if self.rounds < 0:
            raise ConfigError("protocol.rounds", "must be >= 0")
        if self.r_uni < 1:
            raise ConfigError("protocol.r_uni", "must be >= 1")
        sizes = [self.batch_size] if isinstance(self.batch_size, int) else self.batch_size
        if not sizes or min(sizes) < 1:
            raise ConfigError("protocol.batch_size", "batch sizes must be >= 1")
        if self.lr <= 0:
            raise ConfigError("protocol.lr", "must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("protocol.weight_decay", "must be >= 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("protocol.adam_betas", "expected two values in [0, 1)")
        _check_choice("protocol.precision", self.precision, tuple(PRECISIONS))
        _check_choice("protocol.visit_order", self.visit_order, VISIT_ORDERS)
        _check_choice("protocol.scheduling", self.scheduling, SCHEDULERS)
        _check_choice("protocol.encoder_divisor", self.encoder_divisor, ENCODER_DIVISORS)
        _check_choice("protocol.rho", self.rho, RHO_POLICIES)


@dataclass
class DataConfig:
    target: Optional[int] = None
    source: str = "synthetic"
    paths: List[str] = field(default_factory=list)
    num_domains: int = 4
    amplitude: float = 0.5
    noise: float = 0.05
    style_shifts: bool = True
    style_strength: float = 1.0
    spurious_strength: float = 0.0
    bonafide_per_domain: int = 48
    attacks_per_type: int = 24
    frames_per_group: int = 4
    split_by_attack: bool = False
    seed: int = 2024

    def validate(self) -> None:
        _check_choice("data.source", self.source, DATA_SOURCES)
        if self.target is None:
            raise ConfigError("data.target", "is required")
        domains = len(self.paths) if self.source == "file" else self.num_domains
        if self.source == "file" and not self.paths:
            raise ConfigError("data.paths", "file source needs one path per domain")
        if domains < 2:
            raise ConfigError("data.num_domains", "leave-one-out needs at least 2 domains")
        if not 0 <= self.target < domains:
            raise ConfigError("data.target", f"must be a domain id in [0, {domains})")
        if self.amplitude < 0:
            raise ConfigError("data.amplitude", "must be >= 0")
        if self.noise < 0:
            raise ConfigError("data.noise", "must be >= 0")
        if self.style_strength < 0:
            raise ConfigError("data.style_strength", "must be >= 0")
        if self.spurious_strength < 0:
            raise ConfigError("data.spurious_strength", "must be >= 0")
        if min(self.bonafide_per_domain, self.attacks_per_type, self.frames_per_group) < 1:
            raise ConfigError("data.bonafide_per_domain", "sample counts must be >= 1")


@dataclass
class EvalConfig:
    inference_policy: str = "sampled"
    granularity: str = "batch"
    fixed_block: Optional[int] = None
    average_draws: int = 8
    threshold_policy: str = "eer"
    fpr_target: float = 0.01
    interpolate_tpr: bool = False
    group_average: bool = True
    batch_size: int = 64
    dev_fraction: float = 0.2
    dump_features: bool = False

    def validate(self, depth: int) -> None:
        _check_choice("eval.inference_policy", self.inference_policy, INFERENCE_POLICIES)
        _check_choice("eval.granularity", self.granularity, GRANULARITIES)
        if self.inference_policy == "fixed":
            if self.fixed_block is None or not 1 <= self.fixed_block <= depth:
                raise ConfigError("eval.fixed_block", f"fixed policy needs a block in [1, {depth}]")
        if self.average_draws < 1:
            raise ConfigError("eval.average_draws", "must be >= 1")
        policy = self.threshold_policy
        if policy not in ("eer", "min_hter", "dev") and not policy.startswith("fixed:"):
            raise ConfigError("eval.threshold_policy", "expected eer, min_hter, dev or fixed:<tau>")
        if policy.startswith("fixed:"):
            try:
                float(policy.split(":", 1)[1])
            except ValueError as exc:
                raise ConfigError("eval.threshold_policy", f"bad fixed threshold in '{policy}'") from exc
        if not 0 < self.fpr_target < 1:
            raise ConfigError("eval.fpr_target", "must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size", "must be >= 1")
        if not 0 < self.dev_fraction < 1:
            raise ConfigError("eval.dev_fraction", "must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    run_name: str = "fedsis"
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = DEFAULT_OUTPUT_DIR
    model: ModelConfig = field(default_factory=ModelConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not self.run_name:
            raise ConfigError("run_name", "must not be empty")
        self.model.validate()
        self.protocol.validate()
        self.data.validate()
        self.eval.validate(self.model.depth)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return target


SECTIONS = {
    "model": ModelConfig,
    "protocol": ProtocolConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def _check_choice(key_path: str, value: object, choices: Iterable[str]) -> None:
    choices = tuple(choices)
    if value not in choices:
        raise ConfigError(key_path, f"'{value}' is not one of {list(choices)}")


def _type_matches(value: object, annotation: object) -> bool:
    origin = typing.get_origin(annotation)
    if annotation is Any:
        return True
    if origin is Union:
        return any(_type_matches(value, arg) for arg in typing.get_args(annotation))
    if annotation is type(None):
        return value is None
    if origin in (list, List):
        (item_type,) = typing.get_args(annotation) or (Any,)
        return isinstance(value, list) and all(_type_matches(item, item_type) for item in value)
    if annotation is bool:
        return isinstance(value, bool)
    if annotation is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if annotation is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if annotation is str:
        return isinstance(value, str)
    return isinstance(value, annotation) if isinstance(annotation, type) else True


def _build_section(cls: type, raw: Mapping[str, Any], prefix: str) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(prefix, "expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {item.name for item in dataclasses.fields(cls)}
    values: Dict[str, Any] = {}
    for key, value in raw.items():
        key_path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(key_path, f"unknown key (valid keys: {sorted(known)})")
        if not _type_matches(value, hints[key]):
            raise ConfigError(key_path, f"value {value!r} does not match type {hints[key]}")
        if hints[key] is float and isinstance(value, int):
            value = float(value)
        values[key] = value
    return cls(**values)


def config_from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from parsed YAML."""

    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("", "configuration root must be a mapping")
    top_level = {item.name for item in dataclasses.fields(ExperimentConfig)}
    kwargs: Dict[str, Any] = {}
    for key, value in raw.items():
        if key not in top_level:
            raise ConfigError(str(key), f"unknown key (valid keys: {sorted(top_level)})")
        if key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], value or {}, key)
        else:
            hints = typing.get_type_hints(ExperimentConfig)
            if not _type_matches(value, hints[key]):
                raise ConfigError(key, f"value {value!r} does not match type {hints[key]}")
            kwargs[key] = value
    config = ExperimentConfig(**kwargs)
    return config.validate()


def valid_keys() -> List[str]:
    """Every dotted key accepted by overrides and sweeps."""

    keys = [item.name for item in dataclasses.fields(ExperimentConfig) if item.name not in SECTIONS]
    for section, cls in SECTIONS.items():
        keys.extend(f"{section}.{item.name}" for item in dataclasses.fields(cls))
    return keys


def parse_override(text: str) -> Tuple[str, Any]:
    """Split ``section.key=value``; the value follows YAML scalar rules."""

    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key_path, raw_value = text.split("=", 1)
    key_path = key_path.strip()
    try:
        value = yaml.safe_load(raw_value) if raw_value.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(key_path, f"cannot parse value '{raw_value}'") from exc
    return key_path, value


def apply_override(raw: MutableMapping[str, Any], key_path: str, value: Any) -> None:
    if key_path not in valid_keys():
        raise ConfigError(key_path, f"unknown key (valid keys: {valid_keys()})")
    parts = key_path.split(".")
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def environment_defaults() -> Dict[str, Any]:
    defaults: Dict[str, Any] = {}
    output_dir = os.getenv(OUTPUT_DIR_ENV, "").strip()
    if output_dir:
        defaults["output_dir"] = output_dir
    precision = os.getenv(PRECISION_ENV, "").strip()
    if precision:
        defaults["protocol.precision"] = precision
    LOGGER.debug("Environment defaults read", extra={"keys": sorted(defaults)})
    return defaults


def load_config(
        path: Optional[Union[str, Path]] = None,
        overrides: Iterable[str] = (),
        extra: Optional[Mapping[str, Any]] = None,
        defaults: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read the YAML file at ``path`` and layer environment defaults and overrides on top.

    Precedence, lowest first: dataclass defaults, ``defaults`` (dotted keys),
    environment, the file,
    ``extra`` (dotted keys), then ``overrides`` (``key=value`` strings).
    """

    raw: Dict[str, Any] = {}
    for key_path, value in (defaults or {}).items():
        apply_override(raw, key_path, value)
    for key_path, value in environment_defaults().items():
        apply_override(raw, key_path, value)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("", f"cannot read config file {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("", f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("", "configuration root must be a mapping")
        _merge(raw, loaded)
    for key_path, value in (extra or {}).items():
        apply_override(raw, key_path, value)
    for text in overrides:
        apply_override(raw, *parse_override(text))
    return config_from_mapping(raw)


def _merge(base: MutableMapping[str, Any], incoming: Mapping[str, Any]) -> None:
    for key, value in incoming.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), MutableMapping):
            _merge(base[key], value)
        else:
            base[key] = value


__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "LOG_LEVEL_ENV",
    "MODES",
    "ModelConfig",
    "OUTPUT_DIR_ENV",
    "PRECISION_ENV",
    "ProtocolConfig",
    "apply_override",
    "config_from_mapping",
    "environment_defaults",
    "load_config",
    "parse_override",
    "valid_keys",
]
