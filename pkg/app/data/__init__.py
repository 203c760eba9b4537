"""Synthetic domains, partitions and dataset files."""

from .dataset import DomainDataset, SyntheticSample
from .partition import PartitionPlan, leave_one_out, split_by_attack
from .synthetic import DomainSpec, generate, make_domain_specs

__all__ = [
    "DomainDataset",
    "DomainSpec",
    "PartitionPlan",
    "SyntheticSample",
    "generate",
    "leave_one_out",
    "make_domain_specs",
    "split_by_attack",
]
