"""Self-describing binary checkpoint container.

Layout (little-endian)::

    b"KAND" | u32 version | u32 len + UTF-8 config JSON | u64 step
    | u64 bank cursor | u64 bank filled | u32 section count
    | sections: u16 len + UTF-8 name, u8 ndim, u32 dims..., f32 payload
    | u64 checksum (blake2b-64 of every preceding byte)
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import torch

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "FormatError",
    "CorruptionError",
    "MigrationError",
    "Checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "state_checkpoint",
    "restore_state",
    "checkpoint_hash",
]

MAGIC = b"KAND"
VERSION = 1


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


class MigrationError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} cannot be read by this build (expects {expected});"
            " migrate the file first"
        )
        self.found = found
        self.expected = expected


@dataclass
class Checkpoint:
    config: str
    sections: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    bank_cursor: int = 0
    bank_filled: int = 0


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = ckpt.config.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<QQQ", ckpt.step, ckpt.bank_cursor, ckpt.bank_filled)
    out += struct.pack("<I", len(ckpt.sections))
    for name, arr in ckpt.sections.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    out += _checksum(bytes(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("checkpoint ends before its declared contents")
        b = self.data[self.pos: self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise MigrationError(version, VERSION)
    if len(data) < 16 or _checksum(data[:-8]) != data[-8:]:
        raise CorruptionError("checksum mismatch; file is truncated or damaged")
    r = _Reader(data[:-8])
    r.pos = 8
    (cfg_len,) = r.unpack("<I")
    config = r.take(cfg_len).decode("utf-8")
    step, cursor, filled = r.unpack("<QQQ")
    (count,) = r.unpack("<I")
    sections = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
        sections[name] = arr
    if r.pos != len(r.data):
        raise CorruptionError("trailing bytes after the last section")
    return Checkpoint(config, sections, step, cursor, filled)


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    data = encode_checkpoint(ckpt)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def checkpoint_hash(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def state_checkpoint(state, config_json: str) -> Checkpoint:
    """Snapshot every branch tensor plus the bank of a ``DistillState``."""
    sections = {name: t.detach().cpu().numpy().astype("<f4") for name, t in state.named_tensors()}
    sections["bank.storage"] = state.bank.storage.detach().cpu().numpy().astype("<f4")
    return Checkpoint(config_json, sections, state.step, state.bank.cursor, state.bank.filled)


@torch.no_grad()
def restore_state(ckpt: Checkpoint, state) -> None:
    """Copy checkpoint tensors into a freshly built state of the same config."""
    expected = dict(state.named_tensors())
    missing = sorted(set(expected) - set(ckpt.sections))
    extra = sorted(set(ckpt.sections) - set(expected) - {"bank.storage"})
    if missing or extra:
        raise FormatError(f"checkpoint does not match the model: missing {missing[:5]}, extra {extra[:5]}")
    for name, t in expected.items():
        arr = ckpt.sections[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise FormatError(f"{name}: shape {arr.shape} != model {tuple(t.shape)}")
        t.copy_(torch.from_numpy(arr).to(t.dtype))
    bank = ckpt.sections.get("bank.storage")
    if bank is None or tuple(bank.shape) != tuple(state.bank.storage.shape):
        raise FormatError("bank storage missing or mis-shaped")
    state.bank.storage.copy_(torch.from_numpy(bank))
    state.bank.cursor = ckpt.bank_cursor
    state.bank.filled = ckpt.bank_filled
    state.step = ckpt.step
