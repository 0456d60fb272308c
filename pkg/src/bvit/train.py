"""Seeded training loop: cross-entropy, SGD with momentum, warmup + cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import Dataset, normalize
from .errors import ConfigError, DataError, DivergenceError
from .model import BViT

logger = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "lr", "eval_acc")
EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    base_lr: float = 0.05
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 100
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigError(f"train.warmup_steps must be in [0, steps), got {self.warmup_steps}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("train.batch_size and train.eval_every must be positive")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("train.base_lr/weight_decay must be >= 0 and momentum in [0, 1)")
        if any(s <= 0 for s in self.std):
            raise ConfigError(f"train.std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"], d["std"] = list(self.mean), list(self.std)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    x = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * min(x, 1.0)))


@dataclass
class SGD:
    """SGD with heavy-ball momentum and decoupled weight decay on matrices."""

    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)

    def step(self, params, lr: float) -> None:
        for name, p in params:
            if p.grad is None:
                continue
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data - data.dtype.type(lr * self.weight_decay) * data
            buf = self.buffers.get(name)
            buf = p.grad if buf is None else self.momentum * buf + p.grad
            self.buffers[name] = buf
            p.data = (data - data.dtype.type(lr) * buf).astype(data.dtype, copy=False)


def _check_shapes(model: BViT, ds: Dataset) -> None:
    cfg = model.config
    _, h, w, c, k = ds.meta
    if (h, w) != tuple(cfg.image_hw) or c != cfg.channels:
        raise DataError(f"dataset images {h}x{w}x{c} do not match model {cfg.image_hw} x {cfg.channels}")
    if k > cfg.num_classes:
        raise DataError(f"dataset has {k} classes but model head has {cfg.num_classes}")


def evaluate(model: BViT, dataset: Dataset, cfg: Optional[TrainConfig] = None) -> tuple[float, float]:
    """Top-1 accuracy (ties go to the lowest class index) and mean cross-entropy."""
    cfg = cfg or TrainConfig()
    _check_shapes(model, dataset)
    correct, loss_sum = 0, 0.0
    dtype = model.params["head.weight"].dtype.type
    with T.no_grad():
        for lo in range(0, len(dataset), EVAL_BATCH):
            imgs = normalize(dataset.images[lo:lo + EVAL_BATCH], cfg.mean, cfg.std, dtype)
            labels = dataset.labels[lo:lo + EVAL_BATCH].astype(np.int64)
            logits = model(imgs)
            correct += int((np.argmax(logits.data, axis=-1) == labels).sum())
            loss_sum += T.cross_entropy(logits, labels).item() * len(labels)
    return correct / len(dataset), loss_sum / len(dataset)


def batches(n: int, batch_size: int, seed: int):
    """Endless seeded stream of index batches; each epoch is a fresh permutation."""
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield perm[lo:lo + batch_size]


def train(model: BViT, dataset: Dataset, cfg: TrainConfig, eval_dataset: Optional[Dataset] = None,
          log_path=None, trainable: Optional[Callable[[str], bool]] = None,
          deep_grad: bool = True) -> tuple[BViT, list[dict]]:
    """Train in place and return the model with its metrics rows.

    A metrics row (``step, loss, lr, eval_acc``) is recorded every
    ``eval_every`` steps and at the final step; ``eval_acc`` uses
    ``eval_dataset`` (the training set if omitted). ``trainable`` filters
    parameter names; frozen weights still carry gradient to earlier layers.
    """
    _check_shapes(model, dataset)
    if cfg.batch_size > len(dataset):
        raise ConfigError(f"train.batch_size {cfg.batch_size} exceeds dataset size {len(dataset)}")
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    dtype = model.params["head.weight"].dtype.type
    params = [(k, p) for k, p in model.named_parameters() if trainable is None or trainable(k)]
    opt = SGD(momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    stream = batches(len(dataset), cfg.batch_size, cfg.seed)
    rows: list[dict] = []

    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for step in range(1, cfg.steps + 1):
            idx = next(stream)
            imgs = normalize(dataset.images[idx], cfg.mean, cfg.std, dtype)
            loss = T.cross_entropy(model.forward(imgs, deep_grad=deep_grad).logits,
                                   dataset.labels[idx].astype(np.int64))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {step}")
            model.zero_grad()
            loss.backward()
            lr = lr_at(step, cfg)
            opt.step(params, lr)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                acc, _ = evaluate(model, eval_dataset, cfg)
                row = {"step": step, "loss": value, "lr": lr, "eval_acc": acc}
                rows.append(row)
                logger.info("step %d loss %.4f lr %.5f eval_acc %.4f", step, value, lr, acc)
                if writer is not None:
                    writer.writerow([step, repr(value), repr(lr), repr(acc)])
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, rows
