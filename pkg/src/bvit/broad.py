"""Broad attention: re-attend over every layer's queries, keys and values.

The per-layer ``q_i``, ``k_i``, ``v_i`` recorded in an :class:`AttentionTrace`
are concatenated along the feature axis, attended without any projection,
pooled back to the model width and added to the deep output. Nothing here
owns a weight, so the trainable parameter set is the backbone's alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor
from .vit import AttentionTrace, ModelConfig, attend, merge_heads


@dataclass
class BroadQKV:
    """Layer-concatenated queries/keys/values, each ``(..., N+1, h, l*d_head)``."""

    Q: Tensor
    K: Tensor
    V: Tensor
    depth: int

    @property
    def head_dim(self) -> int:
        return self.Q.shape[-1] // self.depth


def broad_connect(trace: AttentionTrace) -> BroadQKV:
    """Concatenate q/k/v of layers 1..l per head, in layer order."""
    if len(trace) == 0:
        raise ShapeError("broad_connect: empty trace")
    ref = trace[0].q.shape
    for i, layer in enumerate(trace):
        for name in ("q", "k", "v"):
            if getattr(layer, name).shape != ref:
                raise ShapeError(
                    f"broad_connect: layer {i + 1} {name} has shape {getattr(layer, name).shape}, expected {ref}")
    return BroadQKV(
        Q=T.concat_lastdim([layer.q for layer in trace]),
        K=T.concat_lastdim([layer.k for layer in trace]),
        V=T.concat_lastdim([layer.v for layer in trace]),
        depth=len(trace),
    )


def _heads_first(x: Tensor) -> Tensor:
    return T.swapaxes(x, -3, -2)


def atten_pf(bqkv: BroadQKV, d: float) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V per head, heads merged; no projections.

    Returns ``(..., N+1, h * l * d_v)`` with head-major feature order.
    """
    if d <= 0:
        raise ValueError(f"atten_pf: scaling dimension must be positive, got {d}")
    ctx, _ = attend(_heads_first(bqkv.Q), _heads_first(bqkv.K), _heads_first(bqkv.V), 1.0 / math.sqrt(d))
    return merge_heads(ctx)


def atten_pf_blocksum(trace: AttentionTrace, d: float) -> Tensor:
    """Same quantity as :func:`atten_pf`, built from per-layer logit sums.

    Logits are accumulated as sum_i q_i k_i^T and the weights applied to
    [v_1, ..., v_l]. Kept as an independent route for cross-checking.
    """
    logits = None
    for layer in trace:
        term = T.matmul(_heads_first(layer.q), T.transpose_last2(_heads_first(layer.k)))
        logits = term if logits is None else T.add(logits, term)
    weights = T.softmax_lastdim(T.scale(logits, 1.0 / math.sqrt(d)))
    values = T.concat_lastdim([_heads_first(layer.v) for layer in trace])
    return merge_heads(T.matmul(weights, values))


def bpool(attended: Tensor, d_p: int) -> Tensor:
    """Adaptive average pooling of the broad feature axis down to ``d_p``."""
    if d_p > attended.shape[-1]:
        raise ShapeError(f"bpool: d_p={d_p} exceeds input extent {attended.shape[-1]}")
    return T.adaptive_avg_pool_lastdim(attended, d_p)


def combine(out_deep: Tensor, out_broad: Tensor, gamma: float) -> Tensor:
    """out_deep + gamma * out_broad."""
    if out_deep.shape != out_broad.shape:
        raise ShapeError(f"combine: shape mismatch {out_deep.shape} vs {out_broad.shape}")
    return T.add(out_deep, T.scale(out_broad, gamma))


def broad_feature(trace: AttentionTrace, config: ModelConfig) -> Tensor:
    """Pooled broad feature ``(..., N+1, D)`` for the configured variant."""
    d = config.dim
    scale = 1.0 / math.sqrt(d)
    last = trace[-1]
    if config.variant == "broad_full":
        attended = atten_pf(broad_connect(trace), d)
    elif config.variant == "broad_with_V_only":
        values = broad_connect(trace).V
        ctx, _ = attend(_heads_first(last.q), _heads_first(last.k), _heads_first(values), scale)
        attended = merge_heads(ctx)
    elif config.variant == "broad_without_V":
        bqkv = broad_connect(trace)
        ctx, _ = attend(_heads_first(bqkv.Q), _heads_first(bqkv.K), _heads_first(last.v), scale)
        attended = merge_heads(ctx)
    else:
        raise ConfigError(f"broad_feature: variant {config.variant!r} has no broad path")
    return bpool(attended, d)


def broad_forward(trace: AttentionTrace, out_deep: Tensor, config: ModelConfig) -> Tensor:
    """Final token features for the configured variant."""
    if config.variant == "deep_only":
        return out_deep
    return combine(out_deep, broad_feature(trace, config), config.gamma)
