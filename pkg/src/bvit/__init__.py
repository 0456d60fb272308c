"""Broad-attention vision transformer on a small numpy autograd engine."""

from .broad import atten_pf, atten_pf_blocksum, bpool, broad_connect, broad_forward, combine
from .model import BViT, ForwardOutput
from .tensor import Tensor, backward, no_grad
from .vit import VARIANTS, AttentionTrace, LayerTrace, ModelConfig

__all__ = [
    "AttentionTrace",
    "BViT",
    "ForwardOutput",
    "LayerTrace",
    "ModelConfig",
    "Tensor",
    "VARIANTS",
    "atten_pf",
    "atten_pf_blocksum",
    "backward",
    "bpool",
    "broad_connect",
    "broad_forward",
    "combine",
    "no_grad",
]

__version__ = "0.1.0"
