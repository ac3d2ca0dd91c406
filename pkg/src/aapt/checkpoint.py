"""Checkpoint container: magic + JSON manifest + little-endian f32 payload.

Round-trips are bit-exact; every file carries its stage provenance tag and
a flat config snapshot so downstream stages can refuse mismatched inputs.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"AAPTCKPT1"
STAGES = ("codec", "stage1", "stage2", "stage3")


class CheckpointError(Exception):
    pass


def save_checkpoint(path, values: dict[str, np.ndarray], stage: str, config: dict) -> None:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    entries = []
    offset = 0
    payload = []
    for name in sorted(values):
        arr = np.ascontiguousarray(values[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"stage": stage, "config": config, "entries": entries}).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path):
    """Returns (values, stage, config)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(raw[start : start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from e
    base = start + hlen
    values = {}
    prev_end = 0
    for ent in header["entries"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = base + ent["offset"]
        if ent["offset"] < prev_end:
            raise CheckpointError("overlapping manifest offsets")
        prev_end = ent["offset"] + 4 * count
        if off + 4 * count > len(raw):
            raise CheckpointError(f"truncated checkpoint payload in {path}")
        values[ent["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    return values, header["stage"], header["config"]


def require_stage(path, expected: str):
    values, stage, config = load_checkpoint(path)
    if stage != expected:
        raise CheckpointError(f"{path} carries stage tag {stage!r}, need {expected!r}")
    return values, config
