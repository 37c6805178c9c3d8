"""Datasets: IDX ingestion, a seeded synthetic generator, and class partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor import DTYPE, make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# clients 1..3 get classes 0-3, 4-6 and 7-9
DEFAULT_PARTITION: dict[int, tuple[int, ...]] = {1: (0, 1, 2, 3), 2: (4, 5, 6), 3: (7, 8, 9)}


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxMismatchError(IdxError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray          # [N] int64
    num_classes: int
    classes: tuple[int, ...] = ()   # global class id of each local label, if remapped

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if not self.classes:
            self.classes = tuple(range(self.num_classes))

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.classes)

    def head(self, n: int) -> "Dataset":
        return self.take(slice(0, n))


def _open(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _check_magic(path, raw: bytes, expected: int, what: str) -> None:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file has {len(raw)} bytes, too short for a magic number")
    (magic,) = struct.unpack_from(">I", raw)
    if magic != expected:
        raise IdxMagicError(f"{path}: magic {magic:#010x}, expected {expected:#010x} ({what})")


def read_idx_images(path) -> np.ndarray:
    raw = _open(path)
    _check_magic(path, raw, IMAGES_MAGIC, "images")
    if len(raw) < 16:
        raise IdxTruncatedError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    n, rows, cols = struct.unpack_from(">III", raw, 4)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise IdxTruncatedError(f"{path}: {n}x{rows}x{cols} pixels need {need} bytes, file has {len(raw)}")
    return np.frombuffer(raw, np.uint8, n * rows * cols, 16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _open(path)
    _check_magic(path, raw, LABELS_MAGIC, "labels")
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: header needs 8 bytes, file has {len(raw)}")
    (n,) = struct.unpack_from(">I", raw, 4)
    if len(raw) < 8 + n:
        raise IdxTruncatedError(f"{path}: {n} labels need {8 + n} bytes, file has {len(raw)}")
    return np.frombuffer(raw, np.uint8, n, 8)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label file pair, scaling pixels by 1/255."""
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise IdxMismatchError(f"{images_path} holds {len(pixels)} images but "
                               f"{labels_path} holds {len(labels)} labels")
    images = (pixels.astype(DTYPE) / DTYPE(255))[:, None, :, :]
    num_classes = max(num_classes, int(labels.max()) + 1)
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 ``pixels`` [N,H,W] and ``labels`` [N] as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def synthetic(num_samples: int, classes: int = 10, image_size: int = 28, seed: int = 0,
              channels: int = 1, split_key: int = 0) -> Dataset:
    """Oriented sine gratings, one orientation and frequency per class, plus noise.

    Each sample gets a random phase and contrast, and Gaussian pixel noise
    (sigma 0.1). Use different ``split_key`` values for train and test sets
    drawn from the same seed.
    """
    if num_samples < 1 or classes < 1:
        raise ValueError("num_samples and classes must be positive")
    rng = make_rng(seed, "synthetic", split_key)
    labels = rng.permutation(np.arange(num_samples) % classes)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    angle = np.pi * labels / classes
    freq = 2.0 + (labels % 3)
    phase = rng.uniform(0, 2 * np.pi, num_samples)
    contrast = rng.uniform(0.3, 0.45, num_samples)
    proj = np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy
    base = 0.5 + contrast[:, None, None] * np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    images = base[:, None] + rng.normal(0, 0.1, (num_samples, channels, image_size, image_size))
    images = np.clip(images, 0, 1).astype(DTYPE)
    return Dataset(images, labels.astype(np.int64), classes)


def even_partition(classes: Sequence[int], num_clients: int) -> dict[int, tuple[int, ...]]:
    """Contiguous class blocks for clients 1..num_clients; reproduces the 4/3/3 split for 10 classes."""
    if num_clients < 1 or num_clients > len(classes):
        raise PartitionError(f"cannot split {len(classes)} classes over {num_clients} clients")
    chunks = np.array_split(np.asarray(classes), num_clients)
    return {i + 1: tuple(int(c) for c in chunk) for i, chunk in enumerate(chunks)}


def parse_partition(text: str) -> dict[int, tuple[int, ...]]:
    """Parse ``"0-3/4-6/7-9"`` or ``"0,1,2,3/4,5,6/7,8,9"`` into client -> classes."""
    spec = {}
    for cid, group in enumerate(text.split("/"), start=1):
        classes: list[int] = []
        for item in group.split(","):
            item = item.strip()
            if not item:
                continue
            lo, sep, hi = item.partition("-")
            classes.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        if not classes:
            raise PartitionError(f"client {cid} has no classes in {text!r}")
        spec[cid] = tuple(classes)
    return spec


def format_classes(classes: Sequence[int]) -> str:
    cs = list(classes)
    if cs == list(range(cs[0], cs[-1] + 1)) and len(cs) > 1:
        return f"{cs[0]}-{cs[-1]}"
    return ",".join(map(str, cs))


def partition(dataset: Dataset, spec: Mapping[int, Sequence[int]]) -> dict[int, Dataset]:
    """Give each client exactly the samples of its classes, relabelled 0..k-1.

    Local label ``j`` stands for ``spec[client][j]``; sample order is preserved.
    """
    seen: dict[int, int] = {}
    for cid, classes in spec.items():
        for c in classes:
            if c in seen:
                raise PartitionError(f"class {c} assigned to clients {seen[c]} and {cid}")
            if not 0 <= c < dataset.num_classes:
                raise PartitionError(f"class {c} of client {cid} not in dataset classes 0..{dataset.num_classes - 1}")
            seen[c] = cid
    out = {}
    for cid, classes in spec.items():
        lookup = np.full(dataset.num_classes, -1, dtype=np.int64)
        lookup[list(classes)] = np.arange(len(classes))
        local = lookup[dataset.labels]
        mask = local >= 0
        if not mask.any():
            raise PartitionError(f"client {cid} received no samples for classes {tuple(classes)}")
        out[cid] = Dataset(dataset.images[mask], local[mask], len(classes), tuple(classes))
    return out


def batches(n: int, batch_size: int, seed: int, client_id: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches of one epoch under the run's deterministic shuffle."""
    order = make_rng(seed, "shuffle", client_id, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
