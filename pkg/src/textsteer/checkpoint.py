"""Sectioned binary checkpoint container.

Layout (little endian)::

    b"TXSTCKPT"  u32 version
    u32 header_len, header JSON (sorted keys)
    u32 array_count, then per array:
        u16 name_len, name utf-8, u8 ndim, u64 * ndim dims, f64 data
    32-byte sha256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"TXSTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays, header: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    hdr = json.dumps(header or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads(raw: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    if len(raw) < len(MAGIC) + 36 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint content hash mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return arrays, header


def save(path: str, arrays, header: dict | None = None) -> str:
    raw = dumps(arrays, header)
    with open(path, "wb") as f:
        f.write(raw)
    return raw[-32:].hex()


def load(path: str):
    with open(path, "rb") as f:
        return loads(f.read())
