"""Binary checkpoint format for named float64 arrays.

Layout: ``MPTC`` magic, u16 version, u16 kind-length + kind, u32 meta-length +
JSON metadata (array names, shapes, config fingerprint), then the arrays as
little-endian float64 in name order, then a 32-byte SHA-256 of everything
before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MPTC"
VERSION = 1
KINDS = ("backbone", "prompt", "annotator")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return arrays_hash(self.arrays)


def arrays_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    names = sorted(ckpt.arrays)
    header = {
        "names": names,
        "shapes": [list(np.shape(ckpt.arrays[n])) for n in names],
        "content_hash": ckpt.content_hash,
        "meta": ckpt.meta,
    }
    kind = ckpt.kind.encode()
    meta = json.dumps(header, sort_keys=True).encode()
    body = b"".join([
        MAGIC, struct.pack("<H", VERSION), struct.pack("<H", len(kind)), kind,
        struct.pack("<I", len(meta)), meta,
        *(np.ascontiguousarray(ckpt.arrays[n], dtype="<f8").tobytes() for n in names),
    ])
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint hash mismatch: file is corrupted")
    pos = 4
    (version,) = struct.unpack_from("<H", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (klen,) = struct.unpack_from("<H", body, pos + 2)
    pos += 4
    kind = body[pos:pos + klen].decode()
    pos += klen
    (mlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos:pos + mlen])
    pos += mlen
    arrays = {}
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(body):
            raise CheckpointError(f"payload too short for array {name!r} of shape {shape}")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("payload length does not match shape metadata")
    ckpt = Checkpoint(kind, arrays, header["meta"])
    if ckpt.content_hash != header["content_hash"]:
        raise CheckpointError("content hash mismatch")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return ckpt.content_hash


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ckpt = from_bytes(path.read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    return ckpt
