"""Bit-exact binary checkpoint format for named tensors.

Layout: 8-byte magic "TWINSCKP", 4-byte little-endian header length, a
UTF-8 JSON header {version, metadata, tensors:[{name, shape, dtype,
offset, length}]}, then a raw little-endian payload. Offsets are
relative to the payload start.
"""

import json
import struct

import numpy as np

from .network import MiniCNN, ModelConfig

MAGIC = b"TWINSCKP"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class BadVersionError(CheckpointError):
    pass


class PayloadBoundsError(CheckpointError):
    pass


def save_tensors(path, tensors, metadata):
    records = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        records.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "metadata": metadata,
                         "tensors": records}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic in {path}")
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint header")
    (header_len,) = struct.unpack("<I", blob[8:12])
    header_end = 12 + header_len
    if header_end > len(blob):
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[12:header_end].decode("utf-8"))
    if header.get("version") != VERSION:
        raise BadVersionError(
            f"unsupported checkpoint version: {header.get('version')}")
    payload = blob[header_end:]
    tensors = {}
    for rec in header["tensors"]:
        start, length = rec["offset"], rec["length"]
        if start < 0 or start + length > len(payload):
            raise PayloadBoundsError(
                f"tensor {rec['name']!r} lies outside the payload")
        arr = np.frombuffer(payload[start:start + length],
                            dtype=_DTYPES[rec["dtype"]])
        expected = int(np.prod(rec["shape"])) if rec["shape"] else 1
        if arr.size != expected:
            raise PayloadBoundsError(
                f"tensor {rec['name']!r} has inconsistent size")
        tensors[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return tensors, header["metadata"]


def save_checkpoint(path, model, metadata=None):
    """Persist a model (parameters, both affine sets, all statistics)."""
    meta = dict(metadata or {})
    cfg = model.config
    meta["model_config"] = {
        "input_shape": list(cfg.input_shape), "widths": list(cfg.widths),
        "target_classes": cfg.target_classes,
        "source_classes": cfg.source_classes, "dtype": cfg.dtype,
        "bn_eps": cfg.bn_eps, "bn_momentum": cfg.bn_momentum}
    save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, metadata)."""
    tensors, meta = load_tensors(path)
    mc = meta["model_config"]
    cfg = ModelConfig(
        input_shape=tuple(mc["input_shape"]), widths=tuple(mc["widths"]),
        target_classes=mc["target_classes"],
        source_classes=mc["source_classes"], dtype=mc["dtype"],
        bn_eps=mc["bn_eps"], bn_momentum=mc["bn_momentum"])
    model = MiniCNN(cfg, rng=np.random.default_rng(0))
    try:
        model.load_state_dict(tensors)
    except KeyError as exc:
        raise CheckpointError(f"checkpoint misses tensor {exc}") from exc
    return model, meta
