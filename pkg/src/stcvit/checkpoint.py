"""Versioned binary checkpoints: JSON metadata plus named little-endian tensors."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .model import ModelConfig, build_variant
from .nn import Module

MAGIC = b"STCK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIII")  # magic, version, metadata bytes, tensor count
_DTYPES = {0: "<f4", 1: "<f8"}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    stats: NormalizationStats
    extra: dict = field(default_factory=dict)  # run configuration, seed, dt

    def build(self) -> Module:
        model = build_variant(self.config, self.extra.get("seed", 0))
        model.load_state_dict(self.state)
        model.eval()
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    meta = json.dumps(
        {"config": ckpt.config.to_dict(), "stats": ckpt.stats.to_dict(), "extra": ckpt.extra},
        sort_keys=True,
    ).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta), len(ckpt.state)), meta]
    for name in sorted(ckpt.state):
        arr = np.asarray(ckpt.state[name])
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<IBI", len(raw), _CODES[arr.dtype], arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    payload = b"".join(parts)
    Path(path).write_bytes(payload)
    return len(payload)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    if len(buf) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header")
    _, version, meta_len, count = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    off = _HEADER.size
    try:
        meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
        off += meta_len
        state = {}
        for _ in range(count):
            n, code, ndim = struct.unpack_from("<IBI", buf, off)
            off += 9
            name = buf[off:off + n].decode("utf-8")
            off += n
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dt = np.dtype(_DTYPES[code])
            size = int(np.prod(shape, dtype=np.int64))
            if off + size * dt.itemsize > len(buf):
                raise CheckpointFormatError(f"{path}: truncated tensor {name!r}")
            state[name] = np.frombuffer(buf, dt, size, off).reshape(shape).astype(dt.newbyteorder("="))
            off += size * dt.itemsize
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return Checkpoint(
        ModelConfig.from_dict(meta["config"]), state, NormalizationStats.from_dict(meta["stats"]), meta["extra"]
    )
