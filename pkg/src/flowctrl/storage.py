"""Versioned little-endian binary containers.

Two layouts live here. The generic container (checkpoints, trajectories, reports)
is a magic tag, a format version, a JSON header describing each array, then the
raw array bytes. The window dataset uses a fixed numeric header followed by
length-prefixed float32 records so it can be read without JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

CONTAINER_MAGIC = b"FLOWCTL\x00"
CONTAINER_VERSION = 1
DATASET_MAGIC = b"FCWINDOW"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<8sIIIIdIIQ")  # magic, version, d_s, d_a, K, fps, L_max, H, count


class FormatError(ValueError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True).encode()
    payload = b"".join([CONTAINER_MAGIC, struct.pack("<IQ", CONTAINER_VERSION, len(header)), header] + blobs)
    _atomic_write(path, payload)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a container file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    start = 8 + 12
    header = json.loads(data[start:start + hlen])
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {header['kind']!r}")
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def _record_dtype(d_s: int, d_a: int, L_max: int, H: int) -> np.dtype:
    return np.dtype([
        ("nbytes", "<u4"), ("instruction", "<i4"), ("trajectory", "<i4"),
        ("history", "<f4", (L_max, d_s)), ("target_states", "<f4", (H, d_s)),
        ("target_actions", "<f4", (H, d_a)),
    ])


def write_window_dataset(path, history, target_states, target_actions, instruction_ids, trajectory_ids,
                         *, K: int, fps: float) -> None:
    n, L_max, d_s = history.shape
    H, d_a = target_actions.shape[1:]
    dt = _record_dtype(d_s, d_a, L_max, H)
    rec = np.zeros(n, dtype=dt)
    rec["nbytes"] = dt.itemsize - 4
    rec["instruction"] = instruction_ids
    rec["trajectory"] = trajectory_ids
    rec["history"] = history
    rec["target_states"] = target_states
    rec["target_actions"] = target_actions
    head = _DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, d_s, d_a, K, float(fps), L_max, H, n)
    _atomic_write(path, head + rec.tobytes())


def read_window_dataset(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: truncated dataset header")
    magic, version, d_s, d_a, K, fps, L_max, H, n = _DATASET_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: not a window dataset")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    dt = _record_dtype(d_s, d_a, L_max, H)
    body = data[_DATASET_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} records of {dt.itemsize} bytes, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    if n and np.any(rec["nbytes"] != dt.itemsize - 4):
        raise FormatError(f"{path}: record length prefix mismatch")
    return {
        "d_s": d_s, "d_a": d_a, "K": K, "fps": fps, "L_max": L_max, "H": H, "count": n,
        "history": rec["history"].astype(np.float64), "target_states": rec["target_states"].astype(np.float64),
        "target_actions": rec["target_actions"].astype(np.float64),
        "instruction": rec["instruction"].astype(np.int64), "trajectory": rec["trajectory"].astype(np.int64),
    }


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
