"""Binary checkpoint: magic, JSON header, named little-endian float32 tensor table.

Layout::

    b"IPLDM1"
    u32 header_len, header (UTF-8 JSON: config, stage hashes, metadata)
    u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 dtype (0 = f32), u8 ndim,
                ndim x u32 dims, prod(dims) x f32 payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"IPLDM1"
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    config: dict
    stages: dict[str, str] = field(default_factory=dict)   # stage -> config hash it was trained under
    meta: dict = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def has(self, stage: str) -> bool:
        return stage in self.stages

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def drop(self, prefixes) -> None:
        for k in [k for k in self.tensors if k.split(".", 1)[0] in prefixes]:
            del self.tensors[k]


def encode_checkpoint(ck: Checkpoint) -> bytes:
    header = json.dumps({"config": ck.config, "stages": ck.stages, "meta": ck.meta},
                        sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        t = ck.tensors[name].detach().to(torch.float32).contiguous()
        nb = name.encode()
        if len(nb) >= 2 ** 16:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", DTYPE_F32, t.dim()),
                  struct.pack(f"<{t.dim()}I", *t.shape),
                  t.numpy().astype("<f4", copy=False).tobytes()]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an IPLDM1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        dtype, ndim = struct.unpack("<BB", take(2))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(header["config"], header.get("stages", {}), header.get("meta", {}), tensors)


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    os.replace(tmp, path)  # never leave a half-written checkpoint behind
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return decode_checkpoint(data)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
