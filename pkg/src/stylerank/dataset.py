"""Labeled image collections: manifest I/O, image decoding, resizing and splits.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with float32 values
in ``[0, 1]``.  A manifest is a CSV file with header ``id,path,label``;
optional leading ``#`` comment lines may fix the class order with
``# classes: a,b,c``.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IMGF32_MAGIC = b"IMF1"
_IMGF32_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    """Raised for malformed manifests, unreadable images and invalid splits."""


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an image tensor and return it as float32 ``(H, W, C)``."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise DatasetError(f"image must be HxWxC with H, W >= 1, got shape {image.shape}")
    if image.shape[2] not in (1, 3):
        raise DatasetError(f"image must have 1 or 3 channels, got {image.shape[2]}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise DatasetError("image values must be finite and within [0, 1]")
    return image


def decode_image(data: bytes) -> np.ndarray:
    """Decode PNG (or any Pillow-readable format) or ``.imgf32`` bytes."""
    if data[:4] == IMGF32_MAGIC:
        return _decode_imgf32(data)
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            return _pil_to_array(img)
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise DatasetError(f"cannot decode image: {exc}") from exc


def _pil_to_array(img: Image.Image) -> np.ndarray:
    if img.mode in ("I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    elif img.mode in ("L", "1"):
        arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    elif img.mode == "I":
        arr = np.clip(np.asarray(img, dtype=np.float32) / 65535.0, 0.0, 1.0)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return check_image(arr)


def _decode_imgf32(data: bytes) -> np.ndarray:
    if len(data) < _IMGF32_HEADER.size:
        raise DatasetError("truncated .imgf32 header")
    magic, h, w, c = _IMGF32_HEADER.unpack_from(data)
    if magic != IMGF32_MAGIC:
        raise DatasetError("bad .imgf32 magic")
    count = h * w * c
    payload = data[_IMGF32_HEADER.size:]
    if len(payload) != 4 * count:
        raise DatasetError(f".imgf32 payload has {len(payload)} bytes, expected {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(h, w, c)
    return check_image(arr)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc.strerror}") from exc
    try:
        return decode_image(data)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def encode_imgf32(image: np.ndarray) -> bytes:
    image = check_image(image)
    h, w, c = image.shape
    return _IMGF32_HEADER.pack(IMGF32_MAGIC, h, w, c) + image.astype("<f4").tobytes()


def encode_png(image: np.ndarray) -> bytes:
    image = check_image(image)
    arr = np.round(image * 255.0).astype(np.uint8)
    img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def write_image(image: np.ndarray, path: str | Path) -> None:
    """Write ``image`` as PNG or ``.imgf32`` depending on the file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".imgf32":
        path.write_bytes(encode_imgf32(image))
    else:
        path.write_bytes(encode_png(image))


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """Broadcast grayscale to ``channels``; RGB is returned as-is."""
    if image.shape[2] == channels:
        return image
    if image.shape[2] == 1:
        return np.repeat(image, channels, axis=2)
    raise DatasetError(f"cannot convert {image.shape[2]}-channel image to {channels} channels")


def resize(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge replication.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * H / target_h - 0.5``,
    so a same-size resize reproduces the input exactly.
    """
    if target_h < 1 or target_w < 1:
        raise DatasetError(f"target size must be >= 1, got {target_h}x{target_w}")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if (h, w) == (target_h, target_w):
        return image.copy()
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.clip(bilinear_sample(image, yy, xx), 0.0, 1.0)


def bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional coordinates; out-of-range coordinates clamp to the edge."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = image[y0, x0] * (1.0 - wx) + image[y0, x1] * wx
    bottom = image[y1, x0] * (1.0 - wx) + image[y1, x1] * wx
    return (top * (1.0 - wy) + bottom * wy).astype(np.float32)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image: np.ndarray
    label: int
    path: str | None = None


@dataclass(frozen=True)
class Dataset:
    samples: tuple[LabeledSample, ...]
    class_names: tuple[str, ...]
    task_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.class_names:
            raise DatasetError("class_names must be nonempty")
        seen = set()
        for s in self.samples:
            if not s.id:
                raise DatasetError("sample ids must be nonempty")
            if s.id in seen:
                raise DatasetError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if not 0 <= s.label < len(self.class_names):
                raise DatasetError(f"sample {s.id!r} has label {s.label} outside [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.class_names, self.task_name)

    def to_arrays(self, size: tuple[int, int] | None = None, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
        """Stack images into an ``(N, H, W, C)`` float32 batch, resizing if ``size`` is given."""
        images = []
        for s in self.samples:
            img = s.image
            if size is not None and img.shape[:2] != tuple(size):
                img = resize(img, *size)
            images.append(to_channels(img, channels))
        if not images:
            raise DatasetError("empty dataset")
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise DatasetError(f"images have differing shapes {sorted(shapes)}; pass a size")
        return np.stack(images).astype(np.float32), self.labels


@dataclass(frozen=True)
class Split:
    train: Dataset
    val: Dataset


def split(dataset: Dataset, train_ratio: float, seed: int) -> Split:
    """Shuffle by ``seed`` and cut at ``floor(N * train_ratio)``."""
    n = len(dataset)
    if n == 0:
        raise DatasetError("empty dataset")
    if not 0.0 < train_ratio < 1.0:
        raise DatasetError(f"train_ratio must be in (0, 1), got {train_ratio}")
    n_train = split_sizes(n, train_ratio)[0]
    if n_train == 0 or n_train == n:
        raise DatasetError(f"train_ratio {train_ratio} on {n} samples yields an empty split")
    order = np.random.default_rng(seed).permutation(n)
    return Split(dataset.subset(order[:n_train]), dataset.subset(order[n_train:]))


def split_sizes(n: int, train_ratio: float) -> tuple[int, int]:
    # Fractions like 0.8 are inexact in binary; the tolerance stops 11851*0.8 style
    # products from landing just below an integer.
    n_train = math.floor(n * train_ratio + 1e-9)
    return n_train, n - n_train


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def load_manifest(path: str | Path, task_name: str | None = None) -> Dataset:
    """Read a manifest CSV and decode every referenced image.

    Image paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()

    fixed_classes: list[str] | None = None
    body_start = 0
    for body_start, line in enumerate(lines):
        stripped = line.strip()
        if not stripped.startswith("#"):
            break
        comment = stripped[1:].strip()
        if comment.lower().startswith("classes:"):
            fixed_classes = [c.strip() for c in comment.split(":", 1)[1].split(",") if c.strip()]
    else:
        body_start = len(lines)

    body = lines[body_start:]
    if not body or [h.strip() for h in next(csv.reader([body[0]]))] != ["id", "path", "label"]:
        raise DatasetError(f"{path}:{body_start + 1}: expected header 'id,path,label'")

    class_names: list[str] = list(fixed_classes) if fixed_classes else []
    index = {name: i for i, name in enumerate(class_names)}
    samples = []
    seen: set[str] = set()
    for offset, row in enumerate(csv.reader(body[1:])):
        lineno = body_start + 2 + offset
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        sid, rel, label = (c.strip() for c in row)
        if not sid or not rel or not label:
            raise DatasetError(f"{path}:{lineno}: empty field")
        if label not in index:
            if fixed_classes:
                raise DatasetError(f"{path}:{lineno}: unknown label {label!r}")
            index[label] = len(class_names)
            class_names.append(label)
        img_path = path.parent / rel
        if not img_path.is_file():
            raise DatasetError(f"{path}:{lineno}: image file not found: {img_path}")
        try:
            image = read_image(img_path)
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if sid in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        samples.append(LabeledSample(sid, image, index[label], rel))

    if not samples:
        raise DatasetError(f"{path}: empty dataset")
    return Dataset(tuple(samples), tuple(class_names), task_name if task_name is not None else path.stem)


def save_manifest(dataset: Dataset, path: str | Path, image_dir: str | Path | None = None,
                  image_format: str = "imgf32") -> None:
    """Write ``dataset`` as a manifest plus one image file per sample.

    Images go to ``image_dir`` (default: ``<manifest stem>_images`` next to the
    manifest).  The class order is pinned with a ``# classes:`` line.
    """
    path = Path(path)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / f"{path.stem}_images"
    image_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".imgf32" if image_format == "imgf32" else ".png"
    buf = io.StringIO()
    buf.write(f"# classes: {','.join(dataset.class_names)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "path", "label"])
    for s in dataset.samples:
        img_path = image_dir / f"{_safe_name(s.id)}{suffix}"
        write_image(s.image, img_path)
        rel = Path(os.path.relpath(img_path, path.parent)).as_posix()
        writer.writerow([s.id, rel, dataset.class_names[s.label]])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _safe_name(sample_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in sample_id)


def class_counts(dataset: Dataset) -> np.ndarray:
    return np.bincount(dataset.labels, minlength=dataset.num_classes)


def relabel(dataset: Dataset, labels: Sequence[int], class_names: Sequence[str], task_name: str) -> Dataset:
    """Same images under a different labeling (e.g. category vs texture task)."""
    samples = tuple(LabeledSample(s.id, s.image, int(l), s.path) for s, l in zip(dataset.samples, labels))
    return Dataset(samples, tuple(class_names), task_name)
