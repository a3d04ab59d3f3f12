"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GZNF"  u32 version
    u32 header_len, header (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x { u32 name_len, name, u32 ndim, ndim x u32 dims, u64 nbytes, float32 data }

Tensors are written in sorted name order, so a save -> load -> save cycle
reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"GZNF"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    header: dict
    tensors: dict = field(default_factory=dict)   # name -> np.ndarray (float32)


def _encode(data: CheckpointData, version: int) -> bytes:
    header = json.dumps(data.header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(data.tensors))]
    for name in sorted(data.tensors):
        arr = np.array(data.tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", arr.nbytes), arr.tobytes()]
    return b"".join(parts)


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, data: CheckpointData, version: int = FORMAT_VERSION) -> None:
    atomic_write(path, _encode(data, version))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_version: int = FORMAT_VERSION) -> CheckpointData:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != expected_version:
        raise CheckpointError(
            f"checkpoint format version {version} does not match supported version {expected_version}")
    header = json.loads(r.take(r.u32()).decode())
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        nbytes = struct.unpack("<Q", r.take(8))[0]
        arr = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).copy()
        tensors[name] = arr
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return CheckpointData(header, tensors)


def state_to_arrays(prefix: str, state: dict) -> dict:
    return {f"{prefix}{k}": v.detach().cpu().float().numpy() for k, v in state.items()}


def arrays_to_state(prefix: str, tensors: dict) -> dict:
    n = len(prefix)
    return {k[n:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
