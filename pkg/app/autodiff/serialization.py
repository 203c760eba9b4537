"""Binary encoding of named tensors used by checkpoints and parameter broadcasts.

Layout (little-endian)::

    b"FSIS" | version u32 | count u32
    count x ( name_len u32 | name utf-8 | rank u32 | rank x extent u32 )
    all tensor values as float64, in header order
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

LOGGER = logging.getLogger(__name__)

MAGIC = b"FSIS"
VERSION = 1
_U32 = struct.Struct("<I")
_VALUE = np.dtype("<f8")


class CheckpointFormatError(ValueError):
    """Raised when a blob is not a valid FSIS tensor archive."""


def _header(named: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(named))]
    for name, array in named.items():
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(extent) for extent in array.shape)
    return b"".join(parts)


def dumps(named: Mapping[str, np.ndarray]) -> bytes:
    header = _header(named)
    body = b"".join(np.ascontiguousarray(array, dtype=_VALUE).tobytes() for array in named.values())
    return header + body


def serialized_size(named: Mapping[str, np.ndarray]) -> int:
    return len(_header(named)) + sum(int(np.asarray(a).size) for a in named.values()) * _VALUE.itemsize


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.blob):
            raise CheckpointFormatError(f"Truncated archive: needed {end} bytes, have {len(self.blob)}")
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(blob: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("Missing FSIS magic")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported FSIS version {version}")
    count = reader.u32()
    shapes = []
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shapes.append((name, tuple(reader.u32() for _ in range(rank))))

    named: Dict[str, np.ndarray] = {}
    for name, shape in shapes:
        size = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(size * _VALUE.itemsize)
        named[name] = np.frombuffer(raw, dtype=_VALUE).reshape(shape).astype(np.float64)
    if reader.offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - reader.offset} trailing bytes after archive")
    return named


def save(path: Union[str, Path], named: Mapping[str, np.ndarray]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(dumps(named))
    LOGGER.info("Wrote checkpoint %s (%d tensors)", target, len(named))
    return target


def load(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


__all__ = [
    "CheckpointFormatError",
    "MAGIC",
    "VERSION",
    "dumps",
    "load",
    "loads",
    "save",
    "serialized_size",
]
