"""Checkpoint files.

Layout (little-endian)::

    "NNW1" | u64 weight count | float32[count] | u32 json length | UTF-8 JSON | u64 CRC64

Weights are written in declaration order: for each body layer its
trainable tensors then its running statistics, then the head tensors.  The
CRC covers every preceding byte.  A model's fingerprint is that stored CRC
(the CRC of the whole file including the trailer would be a constant
residue), so it is identical whether computed from memory or disk.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .._checksum import ChecksumError, FormatError, crc64, fingerprint_hex
from .model import LayerSpec, NetworkModel

MAGIC = b"NNW1"
FORMAT_VERSION = 1


def _ordered_tensors(model: NetworkModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for i in range(len(model.body)):
        prefix = f"body.{i}."
        out += [(k, v) for k, v in model.params.items() if k.startswith(prefix)]
        out += [(k, v) for k, v in model.state.items() if k.startswith(prefix)]
    out += [(k, model.params[k]) for k in model.head_keys]
    return out


def to_bytes(model: NetworkModel) -> bytes:
    tensors = _ordered_tensors(model)
    count = sum(v.size for _, v in tensors)
    meta = {
        "format": "stylerank-checkpoint",
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.layer_specs],
        "class_names": list(model.class_names),
        "feature_dim": model.feature_dim,
        "tensors": [[k, list(v.shape)] for k, v in tensors],
        "provenance": model.provenance,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for _, v in tensors)
    body = MAGIC + struct.pack("<Q", count) + blob + struct.pack("<I", len(meta_bytes)) + meta_bytes
    return body + struct.pack("<Q", crc64(body))


def from_bytes(data: bytes) -> NetworkModel:
    if len(data) < 4 + 8 + 4 + 8:
        raise FormatError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise FormatError(f"not a checkpoint (magic {data[:4]!r})")
    (stored_crc,) = struct.unpack_from("<Q", data, len(data) - 8)
    if crc64(data[:-8]) != stored_crc:
        raise ChecksumError("checkpoint checksum mismatch")
    (count,) = struct.unpack_from("<Q", data, 4)
    blob_end = 12 + 4 * count
    if blob_end + 4 > len(data) - 8:
        raise FormatError("truncated checkpoint")
    (meta_len,) = struct.unpack_from("<I", data, blob_end)
    meta = json.loads(data[blob_end + 4:blob_end + 4 + meta_len].decode("utf-8"))
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")

    specs = [LayerSpec.from_dict(d) for d in meta["layers"]]
    body, head = specs[:-2], specs[-2]
    model = NetworkModel(body, int(head.params["units"]), meta["input_shape"], meta["class_names"],
                         head_bias=bool(head.params.get("bias", True)))
    model.provenance = meta.get("provenance", {})
    weights = np.frombuffer(data, dtype="<f4", count=count, offset=12)
    offset = 0
    for name, shape in meta["tensors"]:
        size = int(np.prod(shape))
        arr = weights[offset:offset + size].astype(np.float32).reshape(shape)
        offset += size
        target = model.params if name in model.params else model.state
        if name not in target or target[name].shape != arr.shape:
            raise FormatError(f"tensor {name} {shape} does not match the declared layers")
        target[name] = arr
    if offset != count or count != model.num_weights():
        raise FormatError("weight count does not match the declared layers")
    return model


def save_checkpoint(model: NetworkModel, path: str | Path) -> str:
    """Write ``model`` to ``path`` and return its fingerprint."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return _trailer_fingerprint(data)


def load_checkpoint(path: str | Path) -> NetworkModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return from_bytes(data)


def _trailer_fingerprint(data: bytes) -> str:
    return fingerprint_hex(struct.unpack("<Q", data[-8:])[0])


def fingerprint(model: NetworkModel) -> str:
    return _trailer_fingerprint(to_bytes(model))
