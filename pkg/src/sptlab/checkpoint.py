"""Checkpoint container: JSON header plus named 64-bit tensor blobs.

Layout: 8-byte magic, u32 header length, UTF-8 JSON header (architecture,
objective, step, config snapshot, tensor manifest with offsets), then raw
little-endian float64 blobs in manifest order.  Save/load round-trips are
bit-exact, which is what makes checkpoint-resume reproduce uninterrupted
training bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"SPTCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to resume training or evaluate a model."""

    step: int
    objective: str
    arch: dict
    config: dict
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    target_params: dict[str, np.ndarray] | None = None


def _groups(ckpt: Checkpoint) -> dict[str, dict[str, np.ndarray]]:
    groups = {"params": ckpt.params}
    if ckpt.opt_m is not None:
        groups["opt_m"] = ckpt.opt_m
    if ckpt.opt_v is not None:
        groups["opt_v"] = ckpt.opt_v
    if ckpt.target_params is not None:
        groups["target"] = ckpt.target_params
    return groups


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    manifest = []
    blobs = []
    offset = 0
    for group, tensors in _groups(ckpt).items():
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            manifest.append({
                "group": group,
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
            })
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format_version": 1,
        "step": ckpt.step,
        "objective": ckpt.objective,
        "arch": ckpt.arch,
        "config": ckpt.config,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[12:header_end].decode("utf-8"))
    blob_base = header_end

    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = blob_base + entry["offset"]
        end = start + 8 * count
        if len(raw) < end:
            raise CheckpointError(f"{path}: truncated tensor payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
    return Checkpoint(
        step=header["step"],
        objective=header["objective"],
        arch=header["arch"],
        config=header["config"],
        params=groups.get("params", {}),
        opt_m=groups.get("opt_m"),
        opt_v=groups.get("opt_v"),
        target_params=groups.get("target"),
    )
