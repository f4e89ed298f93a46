"""EQCK checkpoint files: named float32 tensors plus a JSON manifest.

Layout (all integers little-endian)::

    b"EQCK"
    u16   format version (1)
    u32   manifest length, then the manifest as UTF-8 JSON with sorted keys
    u32   record count
    per record, sorted by name:
        u16  name length, then the UTF-8 name
        u8   rank
        u32  x rank dims
        f32  x prod(dims) values, row-major
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from emomoe.errors import ConfigError, DimensionError, FormatError
from emomoe.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"EQCK"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointManifest(BaseModel):
    config_hash: str
    stages: list[str] = Field(default_factory=list)
    config: dict[str, Any] = Field(default_factory=dict)


def tensor_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def to_float32_grid(arr: np.ndarray) -> np.ndarray:
    return arr.astype(_DTYPE).astype(np.float64)


def snap_to_float32(params: dict[str, Tensor]) -> None:
    """Round every tensor onto the float32 grid so a saved copy reloads bit-identically."""
    for t in params.values():
        t.data = to_float32_grid(t.data)


def encode(manifest: CheckpointManifest, tensors: dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(manifest.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not an EQCK checkpoint (bad magic)", 0)
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}", 4)
    (meta_len,) = r.unpack("<I", "manifest length")
    meta_at = r.pos
    try:
        manifest = CheckpointManifest.model_validate_json(r.take(meta_len, "manifest"))
    except ValidationError as e:
        raise FormatError(f"bad manifest: {e.errors()[0]['msg']}", meta_at) from None

    (count,) = r.unpack("<I", "record count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        record_at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", record_at + 2) from None
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(size * _DTYPE.itemsize, f"values of {name}"), dtype=_DTYPE)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}", record_at)
        tensors[name] = values.reshape(dims).copy()
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last record", r.pos)
    return manifest, tensors


def save_checkpoint(params: dict[str, Tensor], manifest: CheckpointManifest, path: Path) -> None:
    """Write ``{name: Tensor}`` to ``path``; tensors are stored at float32 precision."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(manifest, {name: t.data for name, t in params.items()}))
    logger.info("Saved %d tensors to %s (stages: %s)", len(params), path, ",".join(manifest.stages) or "-")


def read_checkpoint(path: Path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    return decode(buf)


def load_checkpoint(
    params: dict[str, Tensor], path: Path, config_hash: str | None = None
) -> CheckpointManifest:
    """Restore every tensor in ``params`` from ``path``; names and shapes must match exactly."""
    manifest, stored = read_checkpoint(path)
    if config_hash is not None and manifest.config_hash != config_hash:
        raise ConfigError(
            f"{path} was written for config {manifest.config_hash[:12]}, not {config_hash[:12]}"
        )
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise FormatError(f"{path}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, t in params.items():
        if stored[name].shape != t.shape:
            raise DimensionError(f"tensor {name}: checkpoint shape {stored[name].shape}, model shape {t.shape}")
    for name, t in params.items():
        t.data = stored[name].astype(np.float64)
    logger.info("Loaded %d tensors from %s", len(params), path)
    return manifest
