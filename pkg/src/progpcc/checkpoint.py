"""Portable model checkpoints.

One file::

    [magic "PPCK" 4B] [version 1B] [manifest length 4B LE] [manifest JSON utf-8]
    [payload: concatenated little-endian IEEE-754 float32 values]

The manifest maps each named array to its shape and float32-element offset
into the payload, carries the model configuration, and optionally the Adam
step counter.  Optimizer moments are stored as extra arrays named
``opt.m:<param>`` / ``opt.v:<param>``.  JSON keys are sorted and floats
serialized with repr, so saving the same state twice is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .config import ModelConfig
from .model import CodecModel
from .nn import AdamState

MAGIC = b"PPCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _entries(model: CodecModel, opt: Optional[AdamState]):
    arrays = [(p.name, p.data) for p in model.params()]
    if opt is not None:
        for name in sorted(opt.m):
            arrays.append((f"opt.m:{name}", opt.m[name]))
        for name in sorted(opt.v):
            arrays.append((f"opt.v:{name}", opt.v[name]))
    return arrays


def serialize_checkpoint(model: CodecModel, opt: Optional[AdamState] = None) -> bytes:
    manifest = {
        "config": model.config.to_dict(),
        "entries": [],
        "optimizer_step": opt.t if opt is not None else None,
    }
    payload = []
    offset = 0
    for name, data in _entries(model, opt):
        manifest["entries"].append(
            {"name": name, "shape": list(data.shape), "offset": offset})
        flat = np.ascontiguousarray(data, dtype="<f4")
        payload.append(flat.tobytes())
        offset += flat.size
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, bytes([VERSION]), struct.pack("<I", len(blob)), blob,
                     *payload])


def deserialize_checkpoint(data: bytes):
    """Rebuild (model, optimizer state or None) from checkpoint bytes."""
    if len(data) < 9 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if data[4] != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {data[4]}")
    (blob_len,) = struct.unpack_from("<I", data, 5)
    if len(data) < 9 + blob_len:
        raise CheckpointFormatError("manifest cut off")
    try:
        manifest = json.loads(data[9:9 + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"manifest is not valid JSON: {exc}") from exc
    payload = np.frombuffer(data[9 + blob_len:], dtype="<f4")

    arrays = {}
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        if start + n > payload.size:
            raise CheckpointFormatError(f"payload cut off inside {ent['name']!r}")
        arrays[ent["name"]] = payload[start:start + n].astype(np.float64).reshape(shape)

    model = CodecModel(ModelConfig.from_dict(manifest["config"]))
    for p in model.params():
        if p.name not in arrays:
            raise CheckpointFormatError(f"checkpoint is missing parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"parameter {p.name!r} has shape {arrays[p.name].shape}, "
                f"expected {p.data.shape}")
        p.data = arrays[p.name]

    opt = None
    if manifest.get("optimizer_step") is not None:
        opt = AdamState(
            m={n[len("opt.m:"):]: a for n, a in arrays.items() if n.startswith("opt.m:")},
            v={n[len("opt.v:"):]: a for n, a in arrays.items() if n.startswith("opt.v:")},
            t=int(manifest["optimizer_step"]),
        )
    return model, opt


def save_checkpoint(path: str, model: CodecModel,
                    opt: Optional[AdamState] = None) -> None:
    """Write atomically (temp file + rename)."""
    data = serialize_checkpoint(model, opt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
