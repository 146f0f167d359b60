"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MTCK" | u32 version | u32 entry count
    per entry: u32 name length | name (utf-8) | u32 rank | u64 extents * rank | f32 data
    u64 metadata length | metadata (utf-8 JSON)

Tensors are stored as raw float32, so a save/load roundtrip is bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 ndarray, in insertion order
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint) or list(self.tensors) != list(other.tensors):
            return False
        for k, v in self.tensors.items():
            w = other.tensors[k]
            if v.shape != w.shape or v.tobytes() != w.tobytes():
                return False
        return self.meta == other.meta


def to_bytes(ckpt):
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {a.dtype}, expected float32")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{a.ndim}Q", a.ndim, *a.shape))
        parts.append(a.astype("<f4", copy=False).tobytes(order="C"))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(meta)) + meta)
    return b"".join(parts)


def from_bytes(buf):
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(shape)
    (mlen,) = struct.unpack("<Q", take(8))
    meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint metadata")
    return Checkpoint(tensors, meta)


def save(path, ckpt):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
