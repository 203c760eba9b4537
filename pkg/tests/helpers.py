"""Tiny model and data profiles shared by the tests."""

from __future__ import annotations

from typing import Any, Dict, List

from app.config import ExperimentConfig, ModelConfig, config_from_mapping
from app.data.dataset import DomainDataset
from app.data.synthetic import generate_domains, make_domain_specs

# 8x8 input, strides 1 then 2: a 4x4 grid of 16 tokens.
TINY_MODEL: Dict[str, Any] = {
    "image_shape": [8, 8, 3],
    "conv_channels": [4, 8],
    "conv_strides": [1, 2],
    "dim": 16,
    "depth": 4,
    "heads": 2,
}

TINY_DATA: Dict[str, Any] = {
    "num_domains": 4,
    "bonafide_per_domain": 8,
    "attacks_per_type": 4,
    "frames_per_group": 2,
    "seed": 11,
}


def tiny_model(**overrides: Any) -> ModelConfig:
    config = ModelConfig(**{**TINY_MODEL, **overrides})
    config.validate()
    return config


def tiny_experiment(mode: str = "fedsis", target: int = 3, **sections: Dict[str, Any]) -> ExperimentConfig:
    """A validated experiment on the tiny profile; ``sections`` update model/protocol/data/eval."""

    raw: Dict[str, Any] = {
        "run_name": "tiny",
        "model": dict(TINY_MODEL),
        "protocol": {"mode": mode, "rounds": 3, "r_uni": 2, "batch_size": 4},
        "data": {**TINY_DATA, "target": target},
        "eval": {"batch_size": 16},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_mapping(raw)


def tiny_domains(num_domains: int = 4, seed: int = 11, **counts: int) -> List[DomainDataset]:
    specs = make_domain_specs(
        num_domains, seed, TINY_MODEL["image_shape"],
        bonafide_count=counts.get("bonafide_count", 8),
        attack_count=counts.get("attack_count", 4),
        frames_per_group=counts.get("frames_per_group", 2))
    return generate_domains(specs, 0.5, seed)
