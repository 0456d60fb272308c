"""Representation diagnostics and model profiling.

Covers linear CKA between layer outputs, mean attention distance per head,
attention rollout, exact parameter counts and matmul FLOP estimates, plus
the writers for the CSV / PGM / text artifacts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ShapeError
from .model import BViT
from .vit import AttentionTrace, ModelConfig, param_shapes

PUBLISHED_PARAMS = {"bvit-5m": 5.7e6, "bvit-22m": 22.1e6}
PUBLISHED_FLOPS_G = {"bvit-5m": 1.2, "bvit-22m": 4.7}
PUBLISHED_BROAD_FLOPS_G = 1e-5


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# CKA


def centering(n: int) -> np.ndarray:
    return np.eye(n) - np.full((n, n), 1.0 / n)


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Biased HSIC estimate tr(K H L H) / (n - 1)^2 for Gram matrices."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or l.shape != k.shape:
        raise ShapeError(f"hsic: need two equal square Gram matrices, got {k.shape} and {l.shape}")
    n = k.shape[0]
    h = centering(n)
    # tr(KHLH) = sum((HKH) * L) since H is symmetric and idempotent
    return float(np.sum((h @ k @ h) * l) / (n - 1) ** 2)


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA of two feature matrices with matching row count."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"cka: need (n, p) features with equal n, got {x.shape} and {y.shape}")
    if x.shape[0] < 3:
        raise ShapeError(f"cka: need at least 3 samples, got {x.shape[0]}")
    k, l = x @ x.T, y @ y.T
    kk, ll = hsic(k, k), hsic(l, l)
    scale = max(np.abs(k).max(), np.abs(l).max(), 1e-300) ** 2
    if kk <= 1e-24 * scale or ll <= 1e-24 * scale:
        raise DegenerateInputError("cka: features have zero variance after centering")
    return hsic(k, l) / np.sqrt(kk * ll)


def layer_features(trace: AttentionTrace) -> list[np.ndarray]:
    """Each layer output flattened to (images * tokens, D)."""
    return [_arr(layer.output).reshape(-1, _arr(layer.output).shape[-1]) for layer in trace]


def cka_layer_matrix(model: BViT, images: np.ndarray) -> np.ndarray:
    """Pairwise CKA between all transformer layer outputs over a sample of images."""
    if model.config.depth < 2:
        raise ShapeError("cka_layer_matrix: need at least 2 layers")
    if images.ndim != 4 or len(images) < 8:
        raise ShapeError(f"cka_layer_matrix: need a batch of at least 8 images, got {images.shape}")
    with T.no_grad():
        trace = model.forward(images).trace
    feats = layer_features(trace)
    n = len(feats)
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = cka(feats[i], feats[j])
    for i in range(n):
        m[i, i] = cka(feats[i], feats[i])
    return m


# ---------------------------------------------------------------------------
# attention geometry


def patch_centers(config: ModelConfig) -> np.ndarray:
    """(N, 2) pixel coordinates of patch centres, row-major grid order."""
    gh, gw = config.grid
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return (np.stack([rows.ravel(), cols.ravel()], axis=-1) + 0.5) * config.patch


def mean_attention_distance(trace: AttentionTrace, config: ModelConfig) -> np.ndarray:
    """Attention-weighted pixel distance between query and key patches.

    The class token is dropped and each query's patch-to-patch weights are
    renormalised to sum to one. Returns ``(layers, heads)`` averaged over
    queries and images, with heads sorted ascending within each layer.
    """
    c = patch_centers(config)
    dist = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    out = []
    for layer in trace:
        a = _arr(layer.attn).astype(np.float64)
        a = a.reshape((-1,) + a.shape[-3:])[..., 1:, 1:]
        mass = a.sum(-1, keepdims=True)
        a = np.divide(a, mass, out=np.zeros_like(a), where=mass > 0)
        per_query = (a * dist).sum(-1)  # (B, h, N)
        out.append(np.sort(per_query.mean(axis=(0, 2))))
    return np.array(out)


def attention_rollout(trace: AttentionTrace) -> np.ndarray:
    """Rollout of head-averaged attention with a 0.5/0.5 residual mix.

    Returns ``(..., N+1, N+1)`` row-stochastic matrices, one per image.
    """
    result = None
    for layer in trace:
        a = _arr(layer.attn).astype(np.float64).mean(axis=-3)
        a = 0.5 * a + 0.5 * np.eye(a.shape[-1])
        a = a / a.sum(-1, keepdims=True)
        result = a if result is None else a @ result
    if result is None:
        raise ShapeError("attention_rollout: empty trace")
    return result


# ---------------------------------------------------------------------------
# profiling


def count_params(model: Union[BViT, ModelConfig]) -> int:
    shapes = param_shapes(model.config if isinstance(model, BViT) else model)
    return int(sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values()))


@dataclass
class FlopsEstimate:
    """Multiply-accumulate counts for one image.

    ``*_flops`` use 1 MAC = 2 FLOPs. Table-style "FLOPs" figures for vision
    transformers are MAC counts, so compare those against ``deep_macs``.
    """

    deep_macs: int
    broad_macs: int
    breakdown: dict

    @property
    def deep_flops(self) -> int:
        return 2 * self.deep_macs

    @property
    def broad_flops(self) -> int:
        return 2 * self.broad_macs

    @property
    def total_macs(self) -> int:
        return self.deep_macs + self.broad_macs

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs


def broad_macs(config: ModelConfig, seq_len: Optional[int] = None) -> int:
    t = seq_len if seq_len is not None else config.seq_len
    h, l, d = config.heads, config.depth, config.head_dim
    per = t * t * h * d  # one (t x t) logit block or one value application of width d, per head
    return {
        "deep_only": 0,
        "broad_full": 2 * l * per,
        "broad_with_V_only": per + l * per,
        "broad_without_V": l * per + per,
    }[config.variant]


def estimate_flops(config: ModelConfig, resolution: Optional[Sequence[int]] = None) -> FlopsEstimate:
    """Count matmul MACs for one forward pass; softmax/LN/GELU are ignored."""
    hh, ww = resolution if resolution is not None else config.image_hw
    n = (hh // config.patch) * (ww // config.patch)
    t, d, hidden = n + 1, config.dim, config.dim * config.mlp_ratio
    per_layer = {
        "qkv": t * d * 3 * d,
        "attn_logits": t * t * d,
        "attn_apply": t * t * d,
        "proj": t * d * d,
        "mlp": 2 * t * d * hidden,
    }
    breakdown = {
        "patch_embed": n * config.patch_features * d,
        **{f"layers.{k}": config.depth * v for k, v in per_layer.items()},
        "head": d * config.num_classes,
    }
    return FlopsEstimate(deep_macs=int(sum(breakdown.values())), broad_macs=broad_macs(config, t),
                         breakdown=breakdown)


# ---------------------------------------------------------------------------
# writers


def write_cka_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def write_distance_csv(path, distances: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "value"])
        for li, row in enumerate(distances, start=1):
            for hi, v in enumerate(row):
                w.writerow([li, hi, repr(float(v))])


def rollout_map(rollout: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Class-token row of a single rollout matrix as a patch-grid image."""
    return rollout[0, 1:].reshape(config.grid)


def write_pgm(path, grid: np.ndarray) -> None:
    """ASCII P2 graymap, values scaled so the maximum maps to 255."""
    top = grid.max()
    pix = np.zeros(grid.shape, dtype=int) if top <= 0 else np.rint(255.0 * grid / top).astype(int)
    h, w = pix.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in pix]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def profile_text(config: ModelConfig, name: str = "model") -> str:
    deep_cfg = ModelConfig(**{**config.to_dict(), "variant": "deep_only"})
    params = count_params(config)
    deep_params = count_params(deep_cfg)
    est = estimate_flops(config)
    lines = [
        f"model: {name}",
        f"variant: {config.variant}",
        f"resolution: {config.image_hw[0]}x{config.image_hw[1]}",
        f"params_total: {params}",
        f"params_deep_only: {deep_params}",
        f"params_broad_increment: {params - deep_params}",
        f"deep_macs: {est.deep_macs}",
        f"deep_flops_2x: {est.deep_flops}",
        f"broad_increment_macs: {est.broad_macs}",
        f"broad_increment_flops_2x: {est.broad_flops}",
        f"total_macs: {est.total_macs}",
    ]
    for k, v in est.breakdown.items():
        lines.append(f"  macs.{k}: {v}")
    lines.append(
        f"note: published broad-attention increment is {PUBLISHED_BROAD_FLOPS_G:g}G; the analytic count here is "
        f"{est.broad_macs / 1e9:.4g} GMACs ({est.broad_flops / 1e9:.4g} GFLOPs at 2 per MAC). "
        "The published figure is not reproduced and is not asserted.")
    lines.append("note: deep_macs is the figure comparable to published per-image FLOPs tables (1 MAC counted once).")
    return "\n".join(lines) + "\n"
