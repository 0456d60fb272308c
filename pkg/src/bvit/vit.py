"""The deep path: patch embedding and a stack of pre-norm transformer layers.

All functions accept either a single image ``(H, W, C)`` or a batch
``(B, H, W, C)``; token tensors then carry the same optional leading batch
axis, e.g. ``(N+1, D)`` or ``(B, N+1, D)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = ("deep_only", "broad_full", "broad_with_V_only", "broad_without_V")

INIT_STD = 0.02

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the 5M-parameter preset."""

    image_hw: tuple[int, int] = (224, 224)
    channels: int = 3
    patch: int = 16
    dim: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: int = 4
    num_classes: int = 1000
    gamma: float = 1.0
    variant: str = "broad_full"

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        h, w = self.image_hw
        for name in ("channels", "patch", "dim", "depth", "heads", "mlp_ratio", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {getattr(self, name)}")
        if h < 1 or w < 1 or h % self.patch or w % self.patch:
            raise ConfigError(f"model.image_hw {self.image_hw} must be divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"model.dim {self.dim} must be divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not math.isfinite(self.gamma):
            raise ConfigError(f"model.gamma must be finite, got {self.gamma}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_hw[0] // self.patch, self.image_hw[1] // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_features(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerTrace:
    """Captured tensors of one transformer layer.

    ``q``, ``k``, ``v`` are ``(..., N+1, h, d_head)``; ``attn`` is
    ``(..., h, N+1, N+1)``; ``context`` is the head-merged attention output
    before the output projection, ``(..., N+1, D)``; ``output`` is ``z_i``.
    """

    q: Tensor
    k: Tensor
    v: Tensor
    attn: Tensor
    context: Tensor
    output: Optional[Tensor] = None


@dataclass
class AttentionTrace:
    layers: list[LayerTrace] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i: int) -> LayerTrace:
        return self.layers[i]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every trainable tensor, in checkpoint order.

    Broad attention adds nothing here: the variant never changes this table.
    """
    d, hidden = config.dim, config.dim * config.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "cls_token": (d,),
        "pos_embed": (config.seq_len, d),
        "patch_embed.weight": (config.patch_features, d),
        "patch_embed.bias": (d,),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.gain": (d,),
            p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "norm2.gain": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden),
            p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d),
            p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.gain": (d,),
        "norm.bias": (d,),
        "head.weight": (d, config.num_classes),
        "head.bias": (config.num_classes,),
    })
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """N(0, std^2) restricted to +/- bound*std by redrawing out-of-range entries."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal(0.02) projections and embeddings, unit LN gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = truncated_normal(rng, shape, INIT_STD)
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    return params


def subtree(params: Params, prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, P*P*C), patches in row-major grid order."""
    *lead, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, patch * patch * c))


def patch_embed(images, params: Params, config: ModelConfig) -> Tensor:
    """Flatten patches, project to D, prepend the class token, add position embedding."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    expected = tuple(config.image_hw) + (config.channels,)
    if images.ndim not in (3, 4) or images.shape[-3:] != expected:
        raise ShapeError(f"patch_embed: image shape {images.shape} does not match config {expected}")
    dtype = params["patch_embed.weight"].dtype
    lead = images.shape[:-3]
    patches = Tensor(patchify(images.astype(dtype, copy=False), config.patch))
    tokens = T.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, config.dim)), lead)
    x = T.concat([cls, tokens], axis=-2)
    return T.add(x, T.broadcast_to(params["pos_embed"], lead))


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on head-major ``(..., h, N+1, d)`` inputs."""
    logits = T.scale(T.matmul(q, T.transpose_last2(k)), scale)
    weights = T.softmax_lastdim(logits)
    return T.matmul(weights, v), weights


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, N+1, e) -> (..., N+1, h*e), head-major along the features."""
    x = T.swapaxes(x, -3, -2)
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def mhsa(x: Tensor, weights: Params, heads: int) -> tuple[Tensor, LayerTrace]:
    """Multi-head self-attention; returns the projected output and its trace.

    ``weights`` holds ``qkv.weight``, ``qkv.bias``, ``proj.weight`` and
    ``proj.bias``. The logit scale is exactly ``1/sqrt(d_head)``.
    """
    d = x.shape[-1]
    dh = d // heads
    qkv = T.linear(x, weights["qkv.weight"], weights["qkv.bias"])
    qkv = T.reshape(qkv, x.shape[:-1] + (3, heads, dh))
    q, k, v = (T.take(qkv, i, axis=-3) for i in range(3))
    ctx, attn = attend(T.swapaxes(q, -3, -2), T.swapaxes(k, -3, -2), T.swapaxes(v, -3, -2),
                       1.0 / math.sqrt(dh))
    context = merge_heads(ctx)
    out = T.linear(context, weights["proj.weight"], weights["proj.bias"])
    return out, LayerTrace(q=q, k=k, v=v, attn=attn, context=context)


def mlp(x: Tensor, weights: Params) -> Tensor:
    h = T.gelu(T.linear(x, weights["fc1.weight"], weights["fc1.bias"]))
    return T.linear(h, weights["fc2.weight"], weights["fc2.bias"])


def transformer_layer(x: Tensor, weights: Params, heads: int) -> tuple[Tensor, LayerTrace]:
    """Pre-norm block: z_hat = x + MHSA(LN(x)); z = z_hat + MLP(LN(z_hat))."""
    attn_out, trace = mhsa(T.layernorm(x, weights["norm1.gain"], weights["norm1.bias"]),
                           subtree(weights, "attn."), heads)
    z_hat = T.add(x, attn_out)
    z = T.add(z_hat, mlp(T.layernorm(z_hat, weights["norm2.gain"], weights["norm2.bias"]),
                         subtree(weights, "mlp.")))
    trace.output = z
    return z, trace


def forward_deep(images, params: Params, config: ModelConfig) -> tuple[Tensor, AttentionTrace]:
    x = patch_embed(images, params, config)
    trace = AttentionTrace()
    for i in range(config.depth):
        x, layer = transformer_layer(x, subtree(params, f"blocks.{i}."), config.heads)
        trace.layers.append(layer)
    return x, trace


def classify(out: Tensor, params: Params) -> Tensor:
    """Final LayerNorm and linear head on the class token only."""
    cls = T.take(out, 0, axis=-2)
    cls = T.layernorm(cls, params["norm.gain"], params["norm.bias"])
    return T.linear(cls, params["head.weight"], params["head.bias"])
