"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"WDLM"  u32 version (=1)
    u32 config_block_length, then config block:
        u32 field_count; per field: u16 name_len, name (utf-8),
        u8 kind (b"i" int64 | b"f" float64), 8-byte value
    u32 tensor_count; per tensor:
        u32 name_len, name (utf-8), u32 rank, rank x u32 dims,
        prod(dims) x float32
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError, ConfigurationError
from .model import ModelConfig, Parameters

MAGIC = b"WDLM"
FORMAT_VERSION = 1


def _encode_config(config: ModelConfig) -> bytes:
    items = []
    for f in fields(config):
        value = getattr(config, f.name)
        name = f.name.encode("utf-8")
        if isinstance(value, float):
            items.append(struct.pack("<H", len(name)) + name + b"f" + struct.pack("<d", value))
        else:
            items.append(struct.pack("<H", len(name)) + name + b"i" + struct.pack("<q", int(value)))
    return struct.pack("<I", len(items)) + b"".join(items)


def save_checkpoint(params: Parameters, config: ModelConfig, path) -> None:
    if params.config != config:
        raise ConfigurationError("parameters were built for a different config")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    block = _encode_config(config)
    out.append(struct.pack("<I", len(block)))
    out.append(block)
    out.append(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().to(torch.float32).cpu().numpy()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"file truncated in {section}: needed {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def load_checkpoint(path) -> tuple[Parameters, ModelConfig]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "header") != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "header")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")

    (block_len,) = r.unpack("<I", "config block")
    block = _Reader(r.take(block_len, "config block"))
    (count,) = block.unpack("<I", "config block")
    values = {}
    for _ in range(count):
        (name_len,) = block.unpack("<H", "config block")
        name = block.take(name_len, "config block").decode("utf-8")
        kind = block.take(1, "config block")
        if kind == b"f":
            (values[name],) = block.unpack("<d", "config block")
        elif kind == b"i":
            (values[name],) = block.unpack("<q", "config block")
        else:
            raise CheckpointFormatError(f"config field {name!r} has unknown kind {kind!r}")
    known = {f.name for f in fields(ModelConfig)}
    if set(values) - known:
        raise CheckpointFormatError(f"unknown config fields {sorted(set(values) - known)}")
    try:
        config = ModelConfig(**values)
    except (TypeError, ConfigurationError) as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}") from exc

    (n_tensors,) = r.unpack("<I", "tensor table")
    tensors = {}
    for i in range(n_tensors):
        (name_len,) = r.unpack("<I", f"tensor record {i} header")
        name = r.take(name_len, f"tensor record {i} name").decode("utf-8")
        section = f"tensor {name!r}"
        (rank,) = r.unpack("<I", section + " header")
        dims = r.unpack(f"<{rank}I", section + " header") if rank else ()
        n_values = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * n_values, section + " data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes after tensor records")
    try:
        params = Parameters(config, tensors)
    except ConfigurationError as exc:
        raise CheckpointFormatError(str(exc)) from exc
    return params, config
