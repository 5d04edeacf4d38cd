"""Versioned binary checkpoints.

Layout (little-endian)::

    b"TLNT"                       magic
    u32 version                   currently 1
    u32 metadata_length, bytes    UTF-8 JSON (config, priors, config hash)
    u32 record_count
    per record:
        u32 name_length, bytes    UTF-8 parameter name
        u32 ndim, ndim x u32      dimensions
        float64 x prod(dims)      row-major values
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointShapeMismatch, CheckpointVersionMismatch

MAGIC = b"TLNT"
VERSION = 1


def dumps(params: dict, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]), dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    buf = io.BytesIO(blob)

    def read(fmt):
        size = struct.calcsize(fmt)
        chunk = buf.read(size)
        if len(chunk) != size:
            raise CheckpointVersionMismatch("truncated checkpoint")
        return struct.unpack(fmt, chunk)

    if buf.read(4) != MAGIC:
        raise CheckpointVersionMismatch("not a TLNT checkpoint")
    version, meta_len = read("<II")
    if version != VERSION:
        raise CheckpointVersionMismatch(f"checkpoint format version {version}, expected {VERSION}")
    metadata = json.loads(buf.read(meta_len).decode())
    (count,) = read("<I")
    params = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = buf.read(name_len).decode()
        (ndim,) = read("<I")
        dims = read(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(buf.read(8 * n), dtype="<f8")
        if data.size != n:
            raise CheckpointVersionMismatch("truncated checkpoint")
        params[name] = data.reshape(dims).astype(np.float64)
    return params, metadata


def save(path, params: dict, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, metadata))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def assign(module_params: dict, values: dict) -> None:
    """Copy checkpoint arrays into parameters, checking names and shapes."""
    missing = sorted(set(module_params) - set(values))
    extra = sorted(set(values) - set(module_params))
    if missing or extra:
        raise CheckpointShapeMismatch(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in module_params.items():
        if p.data.shape != values[name].shape:
            raise CheckpointShapeMismatch(
                f"{name}: checkpoint shape {values[name].shape} != model shape {p.data.shape}"
            )
        p.data = values[name].copy()
