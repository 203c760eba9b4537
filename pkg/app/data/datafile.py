"""FSDS dataset files.

Layout (little-endian): ``b"FSDS"``, then u32 version, count, height,
width, channels, then ``count`` packed records of
``image f8[H,W,C] | label u8 | domain u16 | attack u8 | group u32``.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .dataset import DomainDataset

LOGGER = logging.getLogger(__name__)

MAGIC = b"FSDS"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


class DatasetFormatError(ValueError):
    """Raised when a file is not a valid FSDS dataset."""


def record_dtype(image_shape: Tuple[int, int, int]) -> np.dtype:
    return np.dtype([
        ("image", "<f8", tuple(image_shape)),
        ("label", "u1"),
        ("domain", "<u2"),
        ("attack", "u1"),
        ("group", "<u4"),
    ])


def dump_dataset(path: Union[str, Path], dataset: DomainDataset) -> Path:
    height, width, channels = dataset.image_shape
    records = np.empty(len(dataset), dtype=record_dtype(dataset.image_shape))
    records["image"] = dataset.images
    records["label"] = dataset.labels
    records["domain"] = dataset.domains
    records["attack"] = dataset.attacks
    records["group"] = dataset.groups
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as handle:
        handle.write(_HEADER.pack(MAGIC, VERSION, len(dataset), height, width, channels))
        handle.write(records.tobytes())
    LOGGER.info("Wrote %d samples to %s", len(dataset), target)
    return target


def load_dataset(path: Union[str, Path]) -> DomainDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for an FSDS header")
    magic, version, count, height, width, channels = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: missing FSDS magic")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported FSDS version {version}")
    dtype = record_dtype((height, width, channels))
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size)
    domains = records["domain"].astype(np.int64)
    local = np.arange(count, dtype=np.int64)
    return DomainDataset(
        images=records["image"].astype(np.float64),
        labels=records["label"].astype(np.int64),
        domains=domains,
        attacks=records["attack"].astype(np.int64),
        groups=records["group"].astype(np.int64),
        uids=(domains << 32) | local,
    )


__all__ = ["DatasetFormatError", "MAGIC", "VERSION", "dump_dataset", "load_dataset", "record_dtype"]
