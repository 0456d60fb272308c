"""Small on-disk image datasets and a seeded synthetic generator.

File format (all integers little-endian)::

    b"BVDS0001"                             8 bytes
    count, H, W, C, num_classes             5 x u32
    images                                  count*H*W*C u8, row-major, C innermost
    labels                                  count u16
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

MAGIC = b"BVDS0001"
HEADER_SIZE = len(MAGIC) + 5 * 4


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) uint8
    labels: np.ndarray  # (count,) uint16
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        if self.images.ndim != 4:
            raise DataError(f"images must be (count, H, W, C), got {self.images.shape}")
        if len(self.images) < 1:
            raise DataError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise DataError(f"labels shape {self.labels.shape} does not match {len(self.images)} images")
        if self.num_classes < 1 or self.num_classes > 65536:
            raise DataError(f"num_classes {self.num_classes} out of range")
        if self.labels.max() >= self.num_classes:
            raise DataError(f"label {int(self.labels.max())} out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def meta(self) -> tuple[int, int, int, int, int]:
        n, h, w, c = self.images.shape
        return n, h, w, c, self.num_classes

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def file_size(count: int, h: int, w: int, c: int) -> int:
    return HEADER_SIZE + count * h * w * c + 2 * count


def save_dataset(ds: Dataset, path) -> None:
    n, h, w, c, k = ds.meta
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", n, h, w, c, k))
        fh.write(ds.images.tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())
    os.replace(tmp, path)


def load_dataset(path) -> Dataset:
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: truncated header ({len(raw)} < {HEADER_SIZE} bytes)")
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:8]!r}")
    n, h, w, c, k = struct.unpack("<5I", raw[8:HEADER_SIZE])
    if n == 0:
        raise DataError(f"{path}: dataset is empty")
    expected = file_size(n, h, w, c)
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DataError(f"{path}: {kind} file, expected {expected} bytes, got {len(raw)}")
    pix = n * h * w * c
    images = np.frombuffer(raw, dtype=np.uint8, count=pix, offset=HEADER_SIZE).reshape(n, h, w, c)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=HEADER_SIZE + pix)
    if labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DataError(f"{path}: label {int(labels[bad])} at index {bad} out of range for {k} classes")
    return Dataset(images.copy(), labels.astype(np.uint16), k)


def synth_dataset(seed: int, count: int, image_hw: Sequence[int] = (32, 32), channels: int = 3,
                  num_classes: int = 4, noise: int = 64, stream: int = 0) -> Dataset:
    """Prototype-plus-noise images, separable by nearest prototype.

    The class prototypes depend only on ``seed``; ``stream`` selects an
    independent draw of labels and noise, so ``stream=0`` and ``stream=1``
    make a train/eval pair over the same classes. Pixels are the prototype
    plus uniform integer noise in ``[-noise, noise]``, clipped to ``[0, 255]``.
    Labels are balanced (``i % num_classes``) then shuffled.
    """
    h, w = image_hw
    proto_rng = np.random.default_rng([seed, 0])
    protos = proto_rng.integers(0, 256, size=(num_classes, h, w, channels), dtype=np.int64)
    rng = np.random.default_rng([seed, 1, stream])
    labels = rng.permutation(np.arange(count) % num_classes)
    jitter = rng.integers(-noise, noise + 1, size=(count, h, w, channels), dtype=np.int64) if noise else 0
    images = np.clip(protos[labels] + jitter, 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.uint16), num_classes)


def prototypes(seed: int, image_hw: Sequence[int] = (32, 32), channels: int = 3, num_classes: int = 4) -> np.ndarray:
    h, w = image_hw
    return np.random.default_rng([seed, 0]).integers(0, 256, size=(num_classes, h, w, channels), dtype=np.int64)


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float], dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> [0, 1] -> per-channel standardised floats."""
    x = images.astype(dtype) / dtype(255.0)
    return (x - np.asarray(mean, dtype=dtype)) / np.asarray(std, dtype=dtype)
