"""Tokenizer, encoder, adapter and head of the hybrid vision transformer."""

from .adapter import adapt
from .bundle import ModelBundle, expected_parameter_counts, init_bundle
from .encoder import encode_prefix
from .head import bonafide_scores, classify
from .sampler import BlockSampler
from .tokenizer import tokenize

__all__ = [
    "BlockSampler",
    "ModelBundle",
    "adapt",
    "bonafide_scores",
    "classify",
    "encode_prefix",
    "expected_parameter_counts",
    "init_bundle",
    "tokenize",
]
