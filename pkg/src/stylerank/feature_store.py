"""Concatenated feature matrices and the ``.fmx`` file format.

``.fmx`` layout (little-endian)::

    "FMX1" | u32 version | u64 n | u32 m | u32 dims[m] | u64 fingerprints[m] | u64 id_table_offset
    zero padding to a 16-byte boundary
    float32 data[n * sum(dims)]        (row-major, fixed stride)
    id table: n x (u32 byte length | UTF-8 id)
    u64 CRC64 of every preceding byte

The data block starts at a 16-byte aligned offset so it can be memory-mapped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._checksum import ChecksumError, FormatError, crc64, fingerprint_hex
from .dataset import Dataset
from .network.checkpoint import fingerprint
from .network.model import ArchitectureError, NetworkModel

MAGIC = b"FMX1"
VERSION = 1
_ALIGN = 16


@dataclass
class FeatureMatrix:
    ids: tuple[str, ...]
    dims: tuple[int, ...]
    data: np.ndarray
    fingerprints: tuple[str, ...] = ()
    _checksum: int | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.ids = tuple(self.ids)
        self.dims = tuple(int(d) for d in self.dims)
        self.fingerprints = tuple(self.fingerprints) or ("0" * 16,) * len(self.dims)
        self.data = np.asarray(self.data, dtype=np.float32)
        n = len(self.ids)
        if self.data.ndim != 2 or self.data.shape != (n, sum(self.dims)):
            raise ValueError(f"data shape {self.data.shape} does not match {n} ids x {sum(self.dims)} dims")
        if len(set(self.ids)) != n:
            raise ValueError("duplicate ids in feature matrix")
        if len(self.fingerprints) != len(self.dims):
            raise ValueError("need one fingerprint per extractor")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature matrix contains non-finite values")
        self._rows = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def row_of(self, item_id: str) -> int:
        return self._rows[item_id]

    def vector(self, item_id: str) -> np.ndarray:
        return self.data[self._rows[item_id]]

    def checksum(self) -> int:
        """CRC64 stored in this matrix's ``.fmx`` serialization."""
        if self._checksum is None:
            self._checksum = struct.unpack("<Q", to_bytes(self)[-8:])[0]
        return self._checksum


def concat_features(parts: Sequence) -> np.ndarray:
    """Concatenate per-extractor feature vectors (or row blocks) in the given order."""
    if len(parts) == 0:
        raise ValueError("need at least one feature part")
    arrays = [np.asarray(p) for p in parts]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("feature parts must be finite")
    return np.concatenate(arrays, axis=-1)


def extract_batches(model: NetworkModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return np.concatenate([model.extract_features(images[i:i + batch_size])
                           for i in range(0, len(images), batch_size)])


def build_matrix(models: Sequence[NetworkModel], dataset: Dataset, batch_size: int = 64) -> FeatureMatrix:
    """Row ``i`` is the concatenation over ``models`` of the features of dataset image ``i``."""
    if not models:
        raise ValueError("need at least one extractor")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    blocks = []
    for model in models:
        try:
            images, _ = dataset.to_arrays(model.input_shape[:2], model.input_shape[2])
        except ValueError as exc:
            raise ArchitectureError(f"dataset images incompatible with extractor input {model.input_shape}: {exc}") from exc
        blocks.append(extract_batches(model, images, batch_size))
    return FeatureMatrix(tuple(dataset.ids), tuple(m.feature_dim for m in models), concat_features(blocks),
                         tuple(fingerprint(m) for m in models))


# --------------------------------------------------------------------------
# .fmx serialization
# --------------------------------------------------------------------------


def _header_size(m: int) -> int:
    raw = 4 + 4 + 8 + 4 + 4 * m + 8 * m + 8
    return -(-raw // _ALIGN) * _ALIGN


def to_bytes(matrix: FeatureMatrix) -> bytes:
    n, m = len(matrix.ids), len(matrix.dims)
    head_size = _header_size(m)
    data = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    id_offset = head_size + len(data)
    header = (MAGIC + struct.pack("<IQI", VERSION, n, m) + struct.pack(f"<{m}I", *matrix.dims)
              + struct.pack(f"<{m}Q", *(int(f, 16) for f in matrix.fingerprints)) + struct.pack("<Q", id_offset))
    header += b"\0" * (head_size - len(header))
    ids = b"".join(struct.pack("<I", len(b)) + b for b in (s.encode("utf-8") for s in matrix.ids))
    body = header + data + ids
    return body + struct.pack("<Q", crc64(body))


def from_bytes(data: bytes, verify: bool = True) -> FeatureMatrix:
    if len(data) < 4 + 4 + 8 + 4 + 8 + 8:
        raise FormatError("truncated .fmx file")
    if data[:4] != MAGIC:
        raise FormatError(f"not an .fmx file or unsupported version (magic {data[:4]!r})")
    stored = struct.unpack_from("<Q", data, len(data) - 8)[0]
    if verify and crc64(data[:-8]) != stored:
        raise ChecksumError(".fmx checksum mismatch")
    version, n, m = struct.unpack_from("<IQI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported .fmx version {version}")
    off = 20
    dims = struct.unpack_from(f"<{m}I", data, off)
    off += 4 * m
    fps = struct.unpack_from(f"<{m}Q", data, off)
    off += 8 * m
    (id_offset,) = struct.unpack_from("<Q", data, off)
    head_size = _header_size(m)
    width = sum(dims)
    if id_offset != head_size + 4 * n * width or id_offset > len(data) - 8:
        raise FormatError("truncated .fmx file")
    matrix = np.frombuffer(data, dtype="<f4", count=n * width, offset=head_size).astype(np.float32)
    ids = []
    pos = id_offset
    for _ in range(n):
        if pos + 4 > len(data) - 8:
            raise FormatError("truncated .fmx id table")
        (length,) = struct.unpack_from("<I", data, pos)
        ids.append(data[pos + 4:pos + 4 + length].decode("utf-8"))
        pos += 4 + length
    if pos != len(data) - 8:
        raise FormatError("trailing bytes in .fmx file")
    return FeatureMatrix(tuple(ids), dims, matrix.reshape(n, width), tuple(fingerprint_hex(f) for f in fps),
                         _checksum=stored)


def save_matrix(matrix: FeatureMatrix, path: str | Path) -> int:
    """Write ``matrix``; returns the stored CRC64."""
    data = to_bytes(matrix)
    Path(path).write_bytes(data)
    matrix._checksum = struct.unpack("<Q", data[-8:])[0]
    return matrix._checksum


def load_matrix(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    return from_bytes(data)
