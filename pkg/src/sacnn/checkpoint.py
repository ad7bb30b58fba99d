"""Binary checkpoint format.

Layout (little-endian)::

    b"SACN"  u16 version  32-byte config digest
    repeated until EOF:
        u16 name length, utf-8 name, 4 x u32 extents, float32 payload

Vectors are stored with extents (len, 1, 1, 1). Records follow the model's
parameter order, so equal parameters always produce identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelConfig, ModelGraph, build_model
from .tensor import make_rng

MAGIC = b"SACN"
VERSION = 1


def _extents(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    return tuple(shape) + (1,) * (4 - len(shape))  # type: ignore[return-value]


def checkpoint_bytes(graph: ModelGraph) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), graph.config.digest()]
    for name, p in graph.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<4I", *_extents(p.shape)))
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, graph: ModelGraph) -> None:
    Path(path).write_bytes(checkpoint_bytes(graph))


def read_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Return (config digest, named float64 arrays with 4-D extents)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    digest = data[6:38]
    pos, arrays = 38, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            shape = struct.unpack_from("<4I", data, pos)
            pos += 16
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            arrays[name] = arr.astype(np.float64).reshape(shape)
            pos += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: truncated or corrupt record at byte {pos}") from exc
    return digest, arrays


def load_checkpoint(path: str | Path, config: ModelConfig) -> ModelGraph:
    digest, arrays = read_checkpoint(path)
    if digest != config.digest():
        raise ConfigError(
            f"{path}: checkpoint digest {digest.hex()} does not match "
            f"{config.variant}/{list(config.widths)} (digest {config.digest().hex()})"
        )
    graph = build_model(config, make_rng(0))
    for name, p in graph.params.items():
        if name not in arrays:
            raise DataError(f"{path}: missing parameter {name}")
        p[...] = arrays[name].reshape(p.shape)
    return graph
