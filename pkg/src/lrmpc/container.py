"""LRMT tensor container.

Layout::

    b"LRMT" | version: u32 LE | header_len: u64 LE | header (UTF-8 JSON) | payloads

The JSON header maps tensor name -> {"shape", "dtype": "f64"|"u64", "offset"},
with offsets relative to the first payload byte. The reserved key ``__meta__``
carries free-form JSON metadata (model layout, share tags, material tags).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LRMT"
VERSION = 1
META_KEY = "__meta__"

_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f64": np.dtype("<f8"), "u64": np.dtype("<u8")}


class ContainerError(ValueError):
    pass


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype.kind == "f":
        return "f64"
    if a.dtype.kind in "ui":
        return "u64"
    raise ContainerError(f"unsupported dtype {a.dtype}")


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if name == META_KEY:
            raise ContainerError(f"{META_KEY!r} is reserved")
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr.astype(_DTYPES[tag], copy=False)).tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": tag, "offset": offset}
        chunks.append(data)
        offset += len(data)
    if meta is not None:
        header[META_KEY] = meta
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise ContainerError("truncated container")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise ContainerError("truncated header")
    header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
    meta = header.pop(META_KEY, {})
    tensors = {}
    for name, info in header.items():
        dt = _DTYPES[info["dtype"]]
        count = int(np.prod(info["shape"], dtype=np.int64))
        lo = start + info["offset"]
        hi = lo + count * dt.itemsize
        if hi > len(buf):
            raise ContainerError(f"payload for {name!r} out of bounds")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=lo).reshape(info["shape"])
        tensors[name] = arr.astype(np.uint64 if info["dtype"] == "u64" else np.float64)
    return tensors, meta


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
