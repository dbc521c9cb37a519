"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"TAPCKPT\\x00"
    version    u32
    hdr_len    u64
    hdr_sha256 32 bytes  digest of the header bytes
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    concatenated little-endian float64 blobs

The header lists every tensor as ``{name, shape, offset}`` plus the payload
digest, so truncation or bit rot is reported instead of half-loading.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TAPCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ32s")


class CheckpointError(Exception):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    header: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def group(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors whose names start with ``prefix + '.'``, prefix stripped."""
        p = prefix + "."
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))

    @property
    def stage(self) -> str:
        return self.header.get("stage", "")


def encode(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = dict(ckpt.header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = entries
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hdr), hashlib.sha256(hdr).digest()) + hdr + payload


def decode(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short to be a checkpoint ({len(buf)} bytes)")
    magic, version, hdr_len, hdr_digest = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version} is not supported "
                              f"(expected {FORMAT_VERSION})")
    start = _PREFIX.size
    hdr = buf[start:start + hdr_len]
    if len(hdr) != hdr_len:
        raise CheckpointError(f"{source}: truncated header")
    if hashlib.sha256(hdr).digest() != hdr_digest:
        raise CheckpointError(f"{source}: header hash mismatch")
    try:
        header = json.loads(hdr.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from exc
    payload = buf[start + hdr_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{source}: payload is {len(payload)} bytes, header says "
                              f"{header.get('payload_bytes')} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{source}: payload hash mismatch")
    tensors = OrderedDict()
    for e in header.pop("tensors"):
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    for key in ("payload_bytes", "payload_sha256", "format_version"):
        header.pop(key, None)
    return Checkpoint(header, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    data = encode(ckpt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, str(path))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_hash(state) -> str:
    """Order-sensitive digest of a name -> array mapping."""
    h = hashlib.sha256()
    for name, arr in state.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
