"""Binary checkpoints: magic, manifest length, JSON manifest, f32 little-endian payload.

The manifest is parsed and validated before any payload byte is read.
Parameters are stored at 32-bit precision and upconverted to float64 on load.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig

MAGIC = b"CPLVAE\x00\x01"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    state: dict[str, np.ndarray]
    vocab: list[str]
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def tensor_table(state: dict[str, np.ndarray]) -> list[dict]:
    table, offset = [], 0
    for name in sorted(state):
        arr = np.asarray(state[name])
        length = int(arr.size) * _F32.itemsize
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": length})
        offset += length
    return table


def validate_table(table: list[dict], payload_len: int | None = None) -> None:
    """Offsets must tile the payload exactly, in order, without gaps or overlap."""
    expected = 0
    names = set()
    for entry in table:
        name = entry.get("name")
        if name in names:
            raise CheckpointError(f"duplicate tensor {name!r}")
        names.add(name)
        size = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["length"] != size * _F32.itemsize:
            raise CheckpointError(f"{name}: length {entry['length']} does not match shape {entry['shape']}")
        if entry["offset"] != expected:
            raise CheckpointError(f"{name}: offset {entry['offset']} overlaps or leaves a gap (expected {expected})")
        expected += entry["length"]
    if payload_len is not None and expected != payload_len:
        raise CheckpointError(f"payload is {payload_len} bytes, table covers {expected}")


def save(path, ckpt: Checkpoint) -> None:
    table = tensor_table(ckpt.state)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "vocab": list(ckpt.vocab),
        "tensors": table,
        "extra": ckpt.extra,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(head)))
        fh.write(head)
        for entry in table:
            fh.write(np.ascontiguousarray(ckpt.state[entry["name"]], dtype=_F32).tobytes())
    tmp.replace(path)


def read_manifest(fh) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    raw = fh.read(_LEN.size)
    if len(raw) != _LEN.size:
        raise CheckpointError("truncated manifest header")
    (n,) = _LEN.unpack(raw)
    try:
        manifest = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {manifest.get('format_version')!r}")
    for key in ("config", "step", "vocab", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"manifest lacks {key!r}")
    validate_table(manifest["tensors"])
    return manifest


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        manifest = read_manifest(fh)
        payload = fh.read()
    table = manifest["tensors"]
    validate_table(table, len(payload))
    state = {}
    for entry in table:
        chunk = payload[entry["offset"] : entry["offset"] + entry["length"]]
        state[entry["name"]] = np.frombuffer(chunk, dtype=_F32).reshape(entry["shape"]).astype(np.float64)
    return Checkpoint(
        config=RunConfig.from_dict(manifest["config"]),
        state=state,
        vocab=manifest["vocab"],
        step=manifest["step"],
        rng_state=manifest.get("rng_state"),
        extra=manifest.get("extra", {}),
    )
