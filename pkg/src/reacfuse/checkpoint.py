"""Versioned little-endian checkpoint container.

Layout::

    b"RFCK" | u32 version | u32 header_len | header (utf-8 JSON) | payload

The header holds the model-kind tag, free-form metadata and a manifest of
``{name, shape, dtype, offset, nbytes}`` rows plus the payload sha256;
offsets are relative to the start of the payload. Arrays are stored little-endian, float arrays as 32-bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RFCK"
VERSION = 1
_DTYPES = {"f4": "<f4", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arrays: dict
    meta: dict = field(default_factory=dict)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _code(arr):
    return "i8" if arr.dtype.kind in "iub" else "f4"


def encode(ckpt: Checkpoint) -> bytes:
    rows, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        rows.append({"name": name, "shape": list(arr.shape), "dtype": code,
                     "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = json.dumps({"kind": ckpt.kind, "meta": ckpt.meta, "tensors": rows,
                         "sha256": hashlib.sha256(payload).hexdigest()},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + payload


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload = memoryview(buf)[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError("payload checksum mismatch (truncated or corrupted)")
    arrays = {}
    for row in header["tensors"]:
        lo, hi = row["offset"], row["offset"] + row["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"truncated payload for {row['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype=_DTYPES[row["dtype"]]).reshape(row["shape"])
        arrays[row["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(kind=header["kind"], arrays=arrays, meta=header.get("meta", {}))


def save(path, kind: str, arrays: dict, meta: dict | None = None) -> str:
    """Atomically write a checkpoint and return its sha256."""
    data = encode(Checkpoint(kind, arrays, meta or {}))
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load(path, kind: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = decode(fh.read())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected kind {kind!r}, found {ckpt.kind!r}")
    return ckpt
