"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CFMC"                      magic
    u32                          format version
    u64 + bytes                  header: canonical JSON (sorted keys, UTF-8)
    u32                          tensor count
    per tensor:
        u32 + bytes              name (UTF-8)
        u8                       dtype tag (1 = float64)
        u32                      rank
        u64 * rank               dims
        f64 * prod(dims)         payload, row-major
    u64                          checksum: first 8 bytes of BLAKE2b over
                                 everything before it, read as u64

The header carries the run configuration snapshot and training metadata
(stage, epoch counter, rng states, optimizer step counts, provenance).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CFMC"
FORMAT_VERSION = 1
DTYPE_FLOAT64 = 1


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "init")

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise comparison of config, metadata and tensors."""
        if canonical_json(self.config) != canonical_json(other.config):
            return False
        if canonical_json(self.meta) != canonical_json(other.meta):
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            self.tensors[k].shape == other.tensors[k].shape and self.tensors[k].tobytes() == other.tensors[k].tobytes()
            for k in self.tensors
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    header = canonical_json({"config": ckpt.config, "meta": ckpt.meta}).encode("utf-8")
    parts += [struct.pack("<Q", len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<BI", DTYPE_FLOAT64, arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 4 + 4 + 8:
        raise CheckpointError("checkpoint is truncated")
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, (stored,) = buf[:-8], struct.unpack("<Q", buf[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checksum mismatch; checkpoint is corrupted")
    r = _Reader(body)
    r.take(8)
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        dtype, rank = r.unpack("<BI")
        if dtype != DTYPE_FLOAT64:
            raise CheckpointError(f"unsupported dtype tag {dtype} for {name}")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(header["config"], tensors, header["meta"], version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
