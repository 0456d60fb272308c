"""Checkpoint files: magic, length-prefixed JSON manifest, raw f32 blob.

Layout::

    b"BVITCKP1"                      8 bytes
    manifest length                  u64 little-endian
    manifest                         UTF-8 JSON
    blob                             little-endian f32, tensors back to back

The manifest records ``config``, ``step`` and, per tensor, ``name``,
``shape`` and ``offset`` (bytes from the start of the blob).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import BViT
from .tensor import Tensor
from .vit import ModelConfig, param_shapes

MAGIC = b"BVITCKP1"
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    step: int = 0

    def to_model(self) -> BViT:
        params = {k: Tensor(v.astype(np.float32), requires_grad=True) for k, v in self.weights.items()}
        return BViT(self.config, params=params)


def save_checkpoint(path, model: BViT, step: int = 0) -> None:
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=_F32)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"config": model.config.to_dict(), "step": int(step), "tensors": entries},
                          sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read and validate a checkpoint.

    If ``config`` is given, every tensor must have the shape that config
    implies; the first mismatch is reported by name.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: manifest length {mlen} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
        stored_cfg = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
        step = int(manifest.get("step", 0))
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc

    blob = raw[16 + mlen:]
    weights, expect_offset = {}, 0
    for e in entries:
        name, shape, off = e["name"], tuple(e["shape"]), int(e["offset"])
        if off != expect_offset:
            raise CheckpointError(f"{path}: tensor {name!r} offset {off}, expected {expect_offset}")
        n = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated blob at tensor {name!r} ({len(blob)} < {off + n} bytes)")
        weights[name] = np.frombuffer(blob, dtype=_F32, count=n // _F32.itemsize, offset=off).reshape(shape).copy()
        expect_offset = off + n
    if expect_offset != len(blob):
        raise CheckpointError(f"{path}: blob has {len(blob) - expect_offset} trailing bytes")

    target = config if config is not None else stored_cfg
    expected = param_shapes(target)
    for name, shape in expected.items():
        if name not in weights:
            raise CheckpointError(f"{path}: tensor {name!r} missing")
        if weights[name].shape != shape:
            raise CheckpointError(
                f"{path}: shape mismatch for tensor {name!r}: stored {weights[name].shape}, config expects {shape}")
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {extra}")
    return Checkpoint(config=target, weights=weights, step=step)
