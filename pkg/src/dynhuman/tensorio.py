"""Raw tensor container (``.tnsr``), JSON helpers and run manifests.

Container layout (all little-endian)::

    magic    4 bytes  b"TNSR"
    version  u16      currently 1
    dtype    u8       1 = float32, 2 = float64, 3 = uint8
    rank     u8
    dims     rank x u32
    payload  row-major elements
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    dt = {("f", 4): np.dtype("<f4"), ("f", 8): np.dtype("<f8"), ("u", 1): np.dtype("u1")}.get(key)
    if dt is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError("rank too large")
    header = MAGIC + struct.pack("<HBB", VERSION, _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ContainerError("bad magic")
    version, code, rank = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unknown container version {version}")
    if code not in _CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    off = 8 + 4 * rank
    if len(blob) < off:
        raise ContainerError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    dt = _CODE_DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - off != n * dt.itemsize:
        raise ContainerError("payload length does not match dims")
    return np.frombuffer(blob, dtype=dt, offset=off).reshape(dims).copy()


def save_tensor(path, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)!r}")


def config_hash(config) -> str:
    """SHA-256 over the canonical (sorted-key, compact) JSON form."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_manifest(out_dir, command: str, config, seed: int, inputs, wall_time: float,
                   version: str) -> Path:
    """Append one run manifest to ``out_dir/runs/``; existing manifests are never touched."""
    runs = Path(out_dir) / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    idx = len(list(runs.glob("run-*.json")))
    path = runs / f"run-{idx:04d}.json"
    while path.exists():
        idx += 1
        path = runs / f"run-{idx:04d}.json"
    write_json(path, {
        "command": command,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "output": str(out_dir),
        "tool_version": version,
        "wall_time_s": wall_time,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    return path
