"""Trace builders and gradient-check cases shared by several test modules."""

import numpy as np

from bvit import tensor as T
from bvit.tensor import Tensor
from bvit.vit import AttentionTrace, LayerTrace


def random_trace(rng, depth, seq, heads, head_dim, dtype=np.float64) -> AttentionTrace:
    layers = []
    for _ in range(depth):
        q, k, v = (Tensor(rng.standard_normal((seq, heads, head_dim)).astype(dtype)) for _ in range(3))
        layers.append(LayerTrace(q=q, k=k, v=v, attn=None, context=None))
    return AttentionTrace(layers)


def attn_trace(weights: list[np.ndarray]) -> AttentionTrace:
    """Trace carrying only attention matrices, for the geometry diagnostics."""
    return AttentionTrace([LayerTrace(q=None, k=None, v=None, attn=Tensor(w), context=None) for w in weights])


def _weighted(fn, rng, out_shape):
    w = Tensor(rng.standard_normal(out_shape))
    return lambda *xs: T.sum(T.mul(fn(*xs), w))


GRAD_SEEDS = range(20)


def _op_cases():
    """(name, builder(rng) -> (scalar fn, input arrays))"""

    def unary(shape, op, out_shape=None):
        def build(rng):
            x = rng.standard_normal(shape)
            return _weighted(op, rng, out_shape or shape), [x]
        return build

    def binary(sa, sb, op, out_shape):
        def build(rng):
            return _weighted(op, rng, out_shape), [rng.standard_normal(sa), rng.standard_normal(sb)]
        return build

    def linear_case(rng):
        return _weighted(T.linear, rng, (2, 3, 4)), [rng.standard_normal((2, 3, 5)),
                                                      rng.standard_normal((5, 4)), rng.standard_normal(4)]

    def layernorm_case(rng):
        return (_weighted(T.layernorm, rng, (3, 6)),
                [rng.standard_normal((3, 6)) * 2, 1 + 0.1 * rng.standard_normal(6), rng.standard_normal(6)])

    def concat_case(rng):
        return (_weighted(lambda a, b, c: T.concat([a, b, c], axis=-1), rng, (2, 6)),
                [rng.standard_normal((2, 1)), rng.standard_normal((2, 2)), rng.standard_normal((2, 3))])

    def ce_case(rng):
        labels = rng.integers(0, 4, size=5)
        return (lambda z: T.cross_entropy(z, labels)), [rng.standard_normal((5, 4))]

    return {
        "add": binary((3, 4), (3, 4), T.add, (3, 4)),
        "sub": binary((3, 4), (3, 4), T.sub, (3, 4)),
        "mul": binary((3, 4), (3, 4), T.mul, (3, 4)),
        "matmul": binary((2, 3, 4), (2, 4, 5), T.matmul, (2, 3, 5)),
        "linear": linear_case,
        "scale": unary((3, 4), lambda x: T.scale(x, 0.7)),
        "sum_axis": unary((3, 4), lambda x: T.sum(x, axis=0), (4,)),
        "mean": unary((3, 4), lambda x: T.mean(x, axis=-1), (3,)),
        "reshape": unary((3, 4), lambda x: T.reshape(x, (2, 6)), (2, 6)),
        "transpose_last2": unary((2, 3, 4), T.transpose_last2, (2, 4, 3)),
        "swapaxes": unary((2, 3, 4), lambda x: T.swapaxes(x, 0, 1), (3, 2, 4)),
        "take": unary((2, 3, 4), lambda x: T.take(x, 1, axis=-2), (2, 4)),
        "broadcast_to": unary((3, 4), lambda x: T.broadcast_to(x, (2,)), (2, 3, 4)),
        "concat": concat_case,
        "slice_lastdim": unary((3, 5), lambda x: T.slice_lastdim(x, 1, 4), (3, 3)),
        "softmax": unary((3, 5), T.softmax_lastdim),
        "layernorm": layernorm_case,
        "gelu": unary((3, 5), T.gelu),
        "pool_even": unary((2, 12), lambda x: T.adaptive_avg_pool_lastdim(x, 4), (2, 4)),
        "pool_overlap": unary((2, 7), lambda x: T.adaptive_avg_pool_lastdim(x, 3), (2, 3)),
        "cross_entropy": ce_case,
    }


GRAD_CASES = _op_cases()
