"""Binary checkpoint container.

Layout: 8-byte magic ``RADTRNG1``, a little-endian uint64 manifest length, the
UTF-8 JSON manifest, then every tensor as contiguous little-endian float32 in
manifest order. Manifest offsets are relative to the start of the blob area.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RADTRNG1"
VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: dict[str, int] = field(default_factory=dict)
    rng: list[int] = field(default_factory=lambda: [0, 0])
    metrics: dict = field(default_factory=dict)
    version: int = VERSION


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    entries = [("param", k, v) for k, v in ckpt.tensors.items()]
    entries += [("optim", k, v) for k, v in ckpt.optimizer.items()]
    for kind, name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype=_BLOB_DTYPE).tobytes()
        table.append({
            "kind": kind,
            "name": name,
            "dtype": "float32",
            "shape": list(np.shape(arr)),
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": ckpt.version,
        "config": _json_safe(ckpt.config),
        "optimizer_steps": ckpt.optimizer_steps,
        "rng": list(ckpt.rng),
        "metrics": _json_safe(ckpt.metrics),
        "tensors": table,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(text)) + text + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    if len(raw) < 16:
        raise FormatError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("version") != VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')!r}")
    base = 16 + n
    tensors, optimizer = {}, {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32":
            raise FormatError(f"tensor {entry['name']}: unsupported dtype {entry['dtype']}")
        start = base + entry["offset"]
        stop = start + entry["length"]
        if stop > len(raw):
            raise FormatError(f"tensor {entry['name']} runs past end of file")
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw[start:stop], dtype=_BLOB_DTYPE)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {entry['name']}: byte length does not match shape {shape}")
        arr = arr.reshape(shape).astype(np.float32)
        (tensors if entry["kind"] == "param" else optimizer)[entry["name"]] = arr
    return Checkpoint(
        config=manifest["config"],
        tensors=tensors,
        optimizer=optimizer,
        optimizer_steps=manifest.get("optimizer_steps", {}),
        rng=manifest.get("rng", [0, 0]),
        metrics=manifest.get("metrics", {}),
        version=manifest["version"],
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def read_manifest(path: str | Path) -> dict:
    """Just the JSON manifest, without materializing tensors."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:8] != MAGIC:
            raise FormatError("not a checkpoint file (bad magic bytes)")
        (n,) = struct.unpack("<Q", head[8:16])
        return json.loads(fh.read(n).decode("utf-8"))
