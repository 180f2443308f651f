"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"MEDPTCK\\0"
    version    uint32    currently 1
    hdr_len    uint64    length of the JSON manifest in bytes
    manifest   hdr_len   UTF-8 JSON, see below
    payload    ...       raw little-endian tensor bytes, back to back

The manifest is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype",
"offset", "nbytes"}, ...]}`` where ``offset`` is relative to the start of the
payload. Training runs store model parameters under ``model/<name>`` and
Adam moments under ``optim/m/<name>`` and ``optim/v/<name>``; ``meta``
carries the run configuration, epoch and optimizer step.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MEDPTCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": le.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<IQ", data, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        manifest = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt manifest") from None
    base = start + hlen
    tensors = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        buf = data[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, manifest["meta"]
