import math

import numpy as np
import pytest
from helpers import random_trace

from bvit import tensor as T
from bvit.broad import atten_pf, atten_pf_blocksum, bpool, broad_connect, broad_feature, broad_forward, combine
from bvit.diagnostics import count_params
from bvit.errors import ConfigError, ShapeError
from bvit.model import BViT
from bvit.tensor import Tensor
from bvit.vit import VARIANTS, AttentionTrace, LayerTrace, ModelConfig, forward_deep, init_params


def atten_pf_loops(trace, d):
    """Per-head reference built from explicit per-layer logit sums."""
    seq, heads, dh = trace[0].q.shape
    depth = len(trace)
    out = np.zeros((seq, heads * depth * dh))
    for h in range(heads):
        logits = sum(trace[i].q.data[:, h, :] @ trace[i].k.data[:, h, :].T for i in range(depth)) / math.sqrt(d)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        vals = np.concatenate([trace[i].v.data[:, h, :] for i in range(depth)], axis=-1)
        out[:, h * depth * dh:(h + 1) * depth * dh] = w @ vals
    return out


class TestBroadConnect:
    def test_depth_one(self, rng):
        tr = random_trace(rng, 1, 5, 2, 3)
        b = broad_connect(tr)
        np.testing.assert_array_equal(b.Q.data, tr[0].q.data)
        np.testing.assert_array_equal(b.V.data, tr[0].v.data)

    def test_extent(self, rng):
        b = broad_connect(random_trace(rng, 12, 3, 1, 64, dtype=np.float32))
        assert b.Q.shape[-1] == 768 and b.head_dim == 64

    def test_slice_back(self, rng):
        tr = random_trace(rng, 4, 5, 3, 2)
        b = broad_connect(tr)
        for i, layer in enumerate(tr):
            for big, small in ((b.Q, layer.q), (b.K, layer.k), (b.V, layer.v)):
                np.testing.assert_array_equal(T.slice_lastdim(big, 2 * i, 2 * i + 2).data, small.data)

    def test_heterogeneous(self, rng):
        tr = random_trace(rng, 2, 5, 2, 3)
        tr.layers.append(random_trace(rng, 1, 5, 2, 4)[0])
        with pytest.raises(ShapeError):
            broad_connect(tr)

    def test_empty(self):
        with pytest.raises(ShapeError):
            broad_connect(AttentionTrace())


class TestAttenPf:
    def test_depth_one_matches_layer_context(self, rng, small_config):
        cfg = ModelConfig(**{**small_config.to_dict(), "depth": 1})
        _, trace = forward_deep(rng.standard_normal((2, 16, 16, 3)), init_params(cfg, seed=1), cfg)
        out = atten_pf(broad_connect(trace), cfg.head_dim)
        np.testing.assert_array_equal(out.data, trace[0].context.data)

    @pytest.mark.parametrize("depth", [1, 2, 12])
    def test_blocksum_identity_f64(self, rng, depth):
        tr = random_trace(rng, depth, 17, 3, 8)
        a = atten_pf(broad_connect(tr), 24).data
        b = atten_pf_blocksum(tr, 24).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)
        np.testing.assert_allclose(a, atten_pf_loops(tr, 24), rtol=0, atol=1e-10)

    @pytest.mark.parametrize("depth", [1, 2, 12])
    def test_blocksum_identity_gaussian_f32(self, rng, depth):
        # unit-variance f32 logits summed over 12 layers lose ~1e-6 to reordering; 1e-5 bounds it
        tr = random_trace(rng, depth, 17, 3, 64, dtype=np.float32)
        a = atten_pf(broad_connect(tr), 192).data
        b = atten_pf_blocksum(tr, 192).data
        assert a.dtype == np.float32
        assert np.max(np.abs(a - b)) < 1e-5

    def test_output_shape(self, rng):
        tr = random_trace(rng, 12, 197, 3, 64, dtype=np.float32)
        assert atten_pf(broad_connect(tr), 192).shape == (197, 2304)

    def test_invalid_scale(self, rng):
        with pytest.raises(ValueError):
            atten_pf(broad_connect(random_trace(rng, 1, 3, 1, 2)), 0)


class TestBPool:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 16)).astype(np.float32)
        np.testing.assert_array_equal(bpool(Tensor(x), 16).data, x)

    def test_twelve_wide_windows(self, rng):
        x = rng.standard_normal((3, 2304))
        out = bpool(Tensor(x), 192).data
        ref = np.array([[x[r, 12 * j:12 * j + 12].mean() for j in range(192)] for r in range(3)])
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_constant(self):
        out = bpool(Tensor(np.full((4, 30), 2.5)), 7).data
        np.testing.assert_allclose(out, 2.5, atol=1e-15)

    def test_too_wide(self):
        with pytest.raises(ShapeError):
            bpool(Tensor(np.zeros((2, 4))), 5)


class TestCombine:
    def test_gamma_zero(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        np.testing.assert_array_equal(combine(Tensor(a), Tensor(b), 0.0).data, a)

    def test_weighted(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        np.testing.assert_allclose(combine(Tensor(a), Tensor(b), 0.6).data, a + 0.6 * b, atol=1e-15)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            combine(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))), 1.0)


class TestVariants:
    def test_deep_only_bit_equal(self, rng, small_config):
        model = BViT(ModelConfig(**{**small_config.to_dict(), "variant": "deep_only"}))
        fo = model.forward(rng.standard_normal((2, 16, 16, 3)).astype(np.float32))
        np.testing.assert_array_equal(fo.out.data, fo.out_deep.data)

    def test_gamma_zero_equals_deep(self, rng, small_config):
        model = BViT(small_config, seed=3).with_config(gamma=0.0)
        fo = model.forward(rng.standard_normal((2, 16, 16, 3)).astype(np.float32))
        np.testing.assert_array_equal(fo.out.data, fo.out_deep.data)

    def test_param_counts_identical(self, small_config):
        counts = {v: count_params(ModelConfig(**{**small_config.to_dict(), "variant": v})) for v in VARIANTS}
        assert len(set(counts.values())) == 1
        names = {v: tuple(BViT(ModelConfig(**{**small_config.to_dict(), "variant": v})).params) for v in VARIANTS}
        assert len(set(names.values())) == 1

    def test_without_v_is_dimension_preserving(self, rng):
        cfg = ModelConfig(image_hw=(16, 16), patch=8, dim=16, depth=3, heads=2, num_classes=3,
                          variant="broad_without_V")
        _, trace = forward_deep(rng.standard_normal((16, 16, 3)), init_params(cfg, seed=0, dtype=np.float64), cfg)
        feat = broad_feature(trace, cfg).data
        # pooling at matching width is the identity, so recompute without it
        bq = broad_connect(trace)
        logits = np.einsum("nhd,mhd->hnm", bq.Q.data, bq.K.data) / math.sqrt(cfg.dim)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        ref = np.einsum("hnm,mhd->nhd", w, trace[-1].v.data).reshape(5, 16)
        np.testing.assert_allclose(feat, ref, atol=1e-12)

    def test_with_v_only_uses_last_layer_logits(self, rng):
        cfg = ModelConfig(image_hw=(16, 16), patch=8, dim=16, depth=3, heads=2, num_classes=3,
                          variant="broad_with_V_only")
        _, trace = forward_deep(rng.standard_normal((16, 16, 3)), init_params(cfg, seed=0, dtype=np.float64), cfg)
        feat = broad_feature(trace, cfg).data
        q, k = trace[-1].q.data, trace[-1].k.data
        logits = np.einsum("nhd,mhd->hnm", q, k) / math.sqrt(cfg.dim)
        w = np.exp(logits - logits.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        vals = broad_connect(trace).V.data
        attended = np.einsum("hnm,mhe->nhe", w, vals).reshape(5, -1)
        ref = attended.reshape(5, 16, -1).mean(-1)  # 48 -> 16 by 3-wide windows
        np.testing.assert_allclose(feat, ref, atol=1e-12)

    def test_deep_only_has_no_broad_feature(self, rng, small_config):
        cfg = ModelConfig(**{**small_config.to_dict(), "variant": "deep_only"})
        with pytest.raises(ConfigError):
            broad_feature(random_trace(rng, 2, 5, 2, 8), cfg)

    def test_depth_one_degeneracy(self, rng):
        cfg = ModelConfig(image_hw=(16, 16), patch=8, dim=16, depth=1, heads=1, num_classes=3)
        params = init_params(cfg, seed=0, dtype=np.float64)
        out_deep, trace = forward_deep(rng.standard_normal((16, 16, 3)), params, cfg)
        # single head: d_head == D, so the broad scale equals the layer's own
        out = broad_forward(trace, out_deep, cfg)
        np.testing.assert_allclose(out.data, out_deep.data + trace[0].context.data, atol=1e-15)

    def test_gamma_zero_argmax_invariance(self, rng, small_config):
        model = BViT(small_config, seed=5)
        imgs = rng.standard_normal((16, 16, 16, 3)).astype(np.float32)
        a = model.with_config(gamma=0.0)(imgs).data.argmax(-1)
        b = model.with_config(variant="deep_only")(imgs).data.argmax(-1)
        np.testing.assert_array_equal(a, b)


def test_gradients_reach_first_layer(rng, small_config):
    model = BViT(small_config, seed=0, dtype=np.float64)
    images = rng.standard_normal((2, 16, 16, 3))
    T.sum(model.forward(images, deep_grad=False).logits).backward()
    grad = model.params["blocks.0.attn.qkv.weight"].grad
    assert grad is not None and np.linalg.norm(grad) > 0


def test_layer_trace_fields_present(rng, small_config):
    model = BViT(small_config)
    trace = model.forward(rng.standard_normal((16, 16, 3)).astype(np.float32)).trace
    assert all(isinstance(layer, LayerTrace) and layer.output is not None for layer in trace)
