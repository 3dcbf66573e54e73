"""Named-tensor archive: one file, length-prefixed JSON header, raw little-endian body.

Layout::

    u64 little-endian  header length N
    N bytes            UTF-8 JSON {name: {"dtype", "shape", "offset"}, "__meta__": {...}}
    body               tensors back to back, offsets relative to the body start

Tensors are written in sorted-name order and the header is serialized with sorted
keys, so equal content always yields identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any, Mapping

import numpy as np
import torch

from .errors import CheckpointError

META_KEY = "__meta__"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
_TORCH_TO_CODE = {torch.float32: "f32", torch.float64: "f64"}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        code = _TORCH_TO_CODE.get(value.dtype)
        if code is None:
            value = value.to(torch.float32)
        return value.detach().cpu().contiguous().numpy()
    return np.asarray(value)


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    return "f32"


def dumps(tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    header: dict[str, Any] = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise CheckpointError(name, "reserved tensor name")
        arr = _as_numpy(tensors[name])
        code = _dtype_code(arr)
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    if meta:
        header[META_KEY] = dict(meta)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def save(path: str | os.PathLike, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> None:
    data = dumps(tensors, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < 8:
        raise CheckpointError("<header>", "truncated archive")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("<header>", f"unreadable header ({exc})") from None
    body = memoryview(data)[8 + n :]
    meta = header.pop(META_KEY, {})
    tensors = {}
    for name, info in header.items():
        dt = _DTYPES.get(info.get("dtype"))
        if dt is None:
            raise CheckpointError(name, f"unsupported dtype {info.get('dtype')!r}")
        shape = tuple(int(s) for s in info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(info["offset"])
        stop = start + count * dt.itemsize
        if stop > len(body):
            raise CheckpointError(name, "tensor data past end of file")
        tensors[name] = np.frombuffer(body[start:stop], dtype=dt).reshape(shape).copy()
    return tensors, meta


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(os.fspath(path), str(exc)) from None
    return loads(data)


def content_hash(tensors: Mapping[str, Any]) -> str:
    """SHA-256 over names, shapes and raw bytes in sorted order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(tuple(arr.shape)).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def require(tensors: Mapping[str, np.ndarray], name: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Fetch ``name`` or raise CheckpointError naming it."""
    if name not in tensors:
        raise CheckpointError(name, "missing tensor")
    arr = tensors[name]
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise CheckpointError(name, f"expected shape {tuple(shape)}, got {tuple(arr.shape)}")
    return arr
