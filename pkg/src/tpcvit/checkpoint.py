"""Binary checkpoint: model tensors, optimizer moments, RNG state and step in one file.

Layout (little-endian)::

    magic  b"TPCCKPT\\0"
    u32    format version
    u32 + bytes   run config as canonical JSON
    u64    step
    u32 + bytes   RNG bit-generator state as canonical JSON
    u32    number of model tensors, then per tensor: u32 + name, tensor record
    u64    optimizer step
    u32    number of moment pairs, then per pair: u32 + name, m record, v record

Tensor records use the tensor core's serialization. Because every field has
a canonical encoding, decoding and re-encoding reproduces the same bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .optim import OptimState
from .tensor import read_tensor, write_tensor

MAGIC = b"TPCCKPT\0"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict
    optim: OptimState = field(default_factory=OptimState)
    rng_state: dict = field(default_factory=dict)
    step: int = 0


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_blob(f, blob: bytes) -> None:
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


class _Reader:
    def __init__(self, raw: bytes):
        self.stream = io.BytesIO(raw)
        self.size = len(raw)

    def take(self, n: int, what: str) -> bytes:
        offset = self.stream.tell()
        chunk = self.stream.read(n)
        if len(chunk) != n:
            raise FormatError(f"truncated checkpoint while reading {what}", offset)
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def blob(self, what: str) -> bytes:
        return self.take(self.u32(what), what)

    def tensor(self, what: str) -> np.ndarray:
        offset = self.stream.tell()
        try:
            return read_tensor(self.stream)
        except FormatError as exc:
            raise FormatError(f"bad tensor record for {what}: {exc}", offset) from None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    _write_blob(f, _canonical_json(ckpt.config))
    f.write(struct.pack("<Q", ckpt.step))
    _write_blob(f, _canonical_json(ckpt.rng_state))
    f.write(struct.pack("<I", len(ckpt.tensors)))
    for name, value in ckpt.tensors.items():
        _write_blob(f, name.encode("utf-8"))
        write_tensor(f, value)
    f.write(struct.pack("<Q", ckpt.optim.step))
    f.write(struct.pack("<I", len(ckpt.optim.m)))
    for name, m in ckpt.optim.m.items():
        _write_blob(f, name.encode("utf-8"))
        write_tensor(f, m)
        write_tensor(f, ckpt.optim.v[name])
    return f.getvalue()


def parse_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported (expected {VERSION})", len(MAGIC))
    config = json.loads(r.blob("config"))
    step = r.u64("step")
    rng_state = json.loads(r.blob("rng state"))
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.blob("tensor name").decode("utf-8")
        tensors[name] = r.tensor(name)
    optim = OptimState(step=r.u64("optimizer step"))
    for _ in range(r.u32("moment count")):
        name = r.blob("moment name").decode("utf-8")
        optim.m[name] = r.tensor(name + " (m)")
        optim.v[name] = r.tensor(name + " (v)")
    if r.stream.tell() != r.size:
        raise FormatError("trailing bytes after checkpoint", r.stream.tell())
    return Checkpoint(config, tensors, optim, rng_state, step)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
