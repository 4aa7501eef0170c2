"""Binary checkpoint format with bit-exact round-tripping.

Byte layout (all integers little-endian):

    magic       4 bytes  b"UWRC"
    version     u32      currently 1
    crc32       u32      CRC-32 of everything after this field
    meta_len    u64      length of the UTF-8 JSON metadata block
    meta        bytes    config snapshot, step counter, RNG state, ...
    n_records   u64
    per record:
        name_len  u16
        name      UTF-8 bytes
        dtype     u8       0 = float32 (the only dtype stored)
        ndim      u8
        dims      u32 * ndim
        data      raw float32, C-order

Model parameters are stored under ``model.<name>`` and optimizer moments
under ``optim.exp_avg.<name>`` / ``optim.exp_avg_sq.<name>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

MAGIC = b"UWRC"
VERSION = 1


class CheckpointError(IOError):
    """Raised for malformed, truncated or corrupted checkpoint files."""


@dataclass
class Checkpoint:
    """A named tensor map plus config/step/optimizer/RNG metadata."""

    config: dict
    step: int = 0
    params: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _pack_record(buf: bytearray, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().to(torch.float32).contiguous().numpy()
    name_b = name.encode("utf-8")
    buf += struct.pack("<H", len(name_b))
    buf += name_b
    buf += struct.pack("<B", data.ndim)
    buf += struct.pack(f"<{data.ndim}I", *data.shape)
    buf += data.astype("<f4", copy=False).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "config": ckpt.config,
        "step": ckpt.step,
        "extra": ckpt.extra,
    }
    meta_b = json.dumps(meta).encode("utf-8")
    body = bytearray()
    body += struct.pack("<Q", len(meta_b))
    body += meta_b
    records = (
        [("model." + k, v) for k, v in ckpt.params.items()]
        + [("optim.exp_avg." + k, v) for k, v in ckpt.exp_avg.items()]
        + [("optim.exp_avg_sq." + k, v) for k, v in ckpt.exp_avg_sq.items()]
    )
    body += struct.pack("<Q", len(records))
    for name, tensor in records:
        _pack_record(body, name, tensor)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", zlib.crc32(body)))
        f.write(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint file: bad magic in {path}")
    version, crc = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = raw[12:]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint integrity check failed for {path}")

    r = _Reader(body)
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_records,) = r.unpack("<Q")
    ckpt = Checkpoint(config=meta["config"], step=meta["step"], extra=meta.get("extra", {}))
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensor = torch.from_numpy(arr.copy())
        if name.startswith("model."):
            ckpt.params[name[len("model.") :]] = tensor
        elif name.startswith("optim.exp_avg_sq."):
            ckpt.exp_avg_sq[name[len("optim.exp_avg_sq.") :]] = tensor
        elif name.startswith("optim.exp_avg."):
            ckpt.exp_avg[name[len("optim.exp_avg.") :]] = tensor
        else:
            raise CheckpointError(f"unknown record namespace: {name}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    return ckpt


def checkpoint_from_model(model, step: int = 0, extra: Optional[dict] = None) -> Checkpoint:
    """Snapshot a model's parameters (no optimizer state)."""
    return Checkpoint(
        config=model.cfg.to_dict(),
        step=step,
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        extra=extra or {},
    )


def load_model_weights(model, ckpt: Checkpoint) -> None:
    state = {k: v for k, v in ckpt.params.items()}
    model.load_state_dict(state)
