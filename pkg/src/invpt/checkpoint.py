"""Weight checkpoints: a JSON manifest followed by a flat float64 blob.

Layout: ``u64 manifest_length`` (little-endian), the UTF-8 manifest, then the
blob. Each manifest entry is ``{"name", "shape", "offset"}`` with the offset
in bytes from the start of the blob. Parameters come first, then batch-norm
running statistics, both in module traversal order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import FormatError
from .nn import Module

FORMAT = "invpt-checkpoint"
VERSION = 1


def state_arrays(model: Module) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += list(model.named_buffers())
    return items


def encode_checkpoint(model: Module, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in state_arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "entries": entries, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: Module, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, meta))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header", len(buf))
    (n,) = struct.unpack_from("<Q", buf, 0)
    if 8 + n > len(buf):
        raise FormatError("truncated checkpoint manifest", len(buf))
    try:
        manifest = json.loads(buf[8: 8 + n])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise FormatError("unreadable checkpoint manifest", 8) from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise FormatError("not an invpt checkpoint", 8)
    blob = buf[8 + n:]
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(blob):
            raise FormatError(f"truncated tensor {e['name']}", 8 + n + len(blob))
        arrays[e["name"]] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return manifest, arrays


def load_into(model: Module, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(params) | set(buffers)) - set(arrays)
    if missing:
        raise FormatError(f"checkpoint lacks {sorted(missing)[:3]}", 0)
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise FormatError(f"shape mismatch for {name}", 0)
        p.data = arrays[name].copy()
    for name, buf in buffers.items():
        buf[...] = arrays[name]
