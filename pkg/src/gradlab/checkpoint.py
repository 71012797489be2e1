"""Self-describing model checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(format version, model spec, parameter layout table, metadata), then the raw
float64 little-endian parameter payload. Round trips are bit exact.
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .layers import ModelSpec, build_model
from .optim import flatten_values

MAGIC = b"GLABCKPT"
VERSION = 1


def save(path, model, meta=None):
    flat = flatten_values(model.named_params)
    header = {
        "version": VERSION,
        "model": model.spec.to_dict(),
        "seed": model.seed,
        "layout": [[e.name, e.offset, e.size, list(e.shape)] for e in flat.layout],
        "meta": dict(meta or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(flat.values, dtype="<f8").tobytes())
    return path


def load(path):
    """Rebuild the model from a checkpoint file; returns (model, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        try:
            header = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable checkpoint header: {e}") from e
        if header.get("version") != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
        payload = f.read()
    spec = ModelSpec.from_dict(header["model"])
    model = build_model(spec, seed=header.get("seed", 0))
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    total = sum(p.data.size for _, p in model.named_params)
    if values.size != total:
        raise FormatError(f"{path}: payload holds {values.size} values, model needs {total}")
    snap = {}
    for name, offset, size, shape in header["layout"]:
        snap[name] = values[offset : offset + size].reshape(shape)
    model.load_snapshot(snap)
    return model, header["meta"]


def params_digest(model):
    """Stable content hash of the parameter payload (mutation checks)."""
    import hashlib

    flat = flatten_values(model.named_params)
    return hashlib.sha256(np.ascontiguousarray(flat.values, dtype="<f8").tobytes()).hexdigest()
