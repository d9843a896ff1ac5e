"""Checkpoint files: JSON header plus a little-endian float32 parameter blob.

Layout: 4-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, raw parameter bytes.  The header carries the config snapshot, the
active label set, the seed, the step count, and a manifest of (name, shape,
byte offset) for every parameter, sorted by name so identical models always
serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    config: dict = field(default_factory=dict)
    labels: tuple[str, ...] = ()
    seed: int = 0
    step: int = 0


def _param_array(value) -> np.ndarray:
    data = value.data if hasattr(value, "data") else value
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    return arr.astype("<f4", copy=False)


def save_checkpoint(path, params: dict, meta: CheckpointMeta) -> None:
    """Write every parameter as float32 little-endian, names sorted."""
    names = sorted(params)
    manifest = []
    blobs = []
    offset = 0
    for name in names:
        arr = _param_array(params[name])
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": meta.config,
        "labels": list(meta.labels),
        "seed": int(meta.seed),
        "step": int(meta.step),
        "params": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    blob = raw[16 + hlen:]
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: parameter {entry['name']!r} runs past "
                                  f"the end of the blob")
        arrays[entry["name"]] = np.frombuffer(
            blob[start:end], dtype="<f4").reshape(shape).copy()
        expected = max(expected, end)
    if expected != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - expected} trailing bytes in blob")
    meta = CheckpointMeta(config=header.get("config", {}),
                          labels=tuple(header.get("labels", ())),
                          seed=int(header.get("seed", 0)),
                          step=int(header.get("step", 0)))
    return meta, arrays
