"""BViT: the deep backbone plus the parameter-free broad attention head."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .broad import broad_forward
from .errors import CheckpointError
from .tensor import Tensor
from .vit import AttentionTrace, ModelConfig, classify, forward_deep, init_params, param_shapes


@dataclass
class ForwardOutput:
    logits: Tensor
    out: Tensor
    out_deep: Tensor
    trace: AttentionTrace


class BViT:
    """Model weights bound to a :class:`ModelConfig`.

    Args:
        config: Architecture and broad-attention settings.
        params: Existing weights; freshly initialised from ``seed`` if omitted.
        seed: Initialisation seed.
        dtype: ``np.float32`` for training, ``np.float64`` for gradient checks.
    """

    def __init__(self, config: ModelConfig, params: Optional[dict[str, Tensor]] = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config
        if params is None:
            params = init_params(config, seed=seed, dtype=dtype)
        else:
            expected = param_shapes(config)
            if set(params) != set(expected):
                missing = sorted(set(expected) - set(params))
                extra = sorted(set(params) - set(expected))
                raise CheckpointError(f"parameter names differ from config: missing={missing} extra={extra}")
            for name, shape in expected.items():
                if params[name].shape != shape:
                    raise CheckpointError(f"tensor {name!r}: shape {params[name].shape} != expected {shape}")
        self.params = params

    def forward(self, images, deep_grad: bool = True) -> ForwardOutput:
        """Run both paths on normalised images.

        With ``deep_grad=False`` the deep output is detached before it is
        combined, so the loss reaches the backbone only through the broad path.
        """
        out_deep, trace = forward_deep(images, self.params, self.config)
        deep = out_deep if deep_grad else T.detach(out_deep)
        out = broad_forward(trace, deep, self.config)
        return ForwardOutput(logits=classify(out, self.params), out=out, out_deep=out_deep, trace=trace)

    def __call__(self, images) -> Tensor:
        return self.forward(images).logits

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def with_config(self, **changes) -> "BViT":
        """Share the weights under a modified config (e.g. another variant or gamma)."""
        return BViT(replace(self.config, **changes), params=self.params)

    def astype(self, dtype) -> "BViT":
        params = {k: Tensor(p.data.astype(dtype), requires_grad=True) for k, p in self.params.items()}
        return BViT(self.config, params=params)
