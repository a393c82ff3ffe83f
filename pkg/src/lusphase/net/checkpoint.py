"""Single-file model checkpoints.

Layout: ``b"LUSPHASE1"``, a little-endian uint32 header length, the UTF-8
JSON header, then every parameter as little-endian float32 in declaration
order, followed by any non-trainable buffers (batch-norm running statistics)
in the same encoding.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import FusionSpec, Model, ModelConfig, build_model

MAGIC = b"LUSPHASE1"


def save_checkpoint(model: Model, path, step: int = 0) -> None:
    params = model.params()
    buffers = model.buffers()
    header = {
        "config": model.cfg.to_dict(),
        "fusion": model.fusion.to_dict(),
        "seed": model.cfg.seed,
        "step": int(step),
        "params": [[name, list(t.shape)] for name, t in params],
        "buffers": [[name, list(b.shape)] for name, b in buffers],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        for _, b in buffers:
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    off = len(MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    off += hlen
    model = build_model(ModelConfig.from_dict(header["config"]), FusionSpec.from_dict(header["fusion"]))
    arrays = [(n, t.data) for n, t in model.params()] + model.buffers()
    layout = header["params"] + header.get("buffers", [])
    if [[n, list(a.shape)] for n, a in arrays] != layout:
        raise FormatError(f"{path}: parameter layout does not match the declared architecture")
    for name, a in arrays:
        count = a.size
        if off + 4 * count > len(data):
            raise FormatError(f"{path}: parameter blob truncated at {name}")
        a[...] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(a.shape)
        off += 4 * count
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after parameter blob")
    return model, header
