"""Binary checkpoint format: one JSON header line, then raw little-endian tensors."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CorruptCheckpoint
from .model import ModelConfig, param_shapes

MAGIC = "blockscan-ckpt-v1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = {
        "format": MAGIC,
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "manifest": manifest,
        "body_bytes": offset,
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
        if header.get("format") != MAGIC:
            raise CorruptCheckpoint(f"{path}: not a checkpoint file")
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
        expected_bytes = header["body_bytes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from None
    if len(body) != expected_bytes:
        raise CorruptCheckpoint(f"{path}: body has {len(body)} bytes, header says {expected_bytes}")
    shapes = param_shapes(config)
    names = [m["name"] for m in manifest]
    if sorted(names) != sorted(shapes):
        raise CorruptCheckpoint(f"{path}: manifest tensors do not match the configuration")
    params = {}
    offset = 0
    for entry in manifest:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if shape != shapes[entry["name"]] or entry["offset"] != offset:
            raise CorruptCheckpoint(f"{path}: manifest entry {entry['name']} is inconsistent")
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(body):
            raise CorruptCheckpoint(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        params[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(body):
        raise CorruptCheckpoint(f"{path}: trailing bytes after last tensor")
    return Checkpoint(config, params, header.get("meta", {}))
