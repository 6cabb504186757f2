import math

import numpy as np
import pytest

from conftest import max_relative_error, numeric_gradient
from services.model.blocks import (AttentionMask, ConvModule, FeedForward, FiLM, Initializer,
                                   Linear, MultiHeadCrossAttention, MultiHeadSelfAttention)
from services.numerics import ops
from services.numerics.tensor import Graph, Tensor
from utils.errors import ContractError, DimensionError


def init64(seed=0):
    return Initializer(seed, np.float64)


def zero_all(module):
    for name, p in module.named_parameters().items():
        p.data = np.ones_like(p.data) if name.endswith("gain") else np.zeros_like(p.data)


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def layer_norm_rows(x, gain, bias, eps=1e-6):
    out = np.zeros_like(x)
    for t in range(x.shape[0]):
        mean = sum(x[t]) / x.shape[1]
        var = sum((v - mean) ** 2 for v in x[t]) / x.shape[1]
        for c in range(x.shape[1]):
            out[t, c] = (x[t, c] - mean) / math.sqrt(var + eps) * gain[c] + bias[c]
    return out


def affine_rows(x, linear):
    w = linear.weight.data
    b = linear.bias.data if linear.bias is not None else np.zeros(w.shape[1])
    out = np.zeros((x.shape[0], w.shape[1]))
    for t in range(x.shape[0]):
        for j in range(w.shape[1]):
            out[t, j] = sum(x[t, i] * w[i, j] for i in range(w.shape[0])) + b[j]
    return out


def module_gradient_error(module, x, *extra, seed=0):
    """對 module 的參數與輸入做有限差分檢查，回傳最大相對誤差。"""
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=module(Tensor(x), *extra).shape)
    x_leaf = Tensor(x.copy(), requires_grad=True)
    params = dict(module.named_parameters(), input=x_leaf)
    grads = Graph(params).backward(ops.sum_(ops.mul(module(x_leaf, *extra), weights)))

    worst = 0.0
    for name, p in params.items():
        def scalar(_, p=p):
            source = x_leaf.data if p is x_leaf else x
            return module(Tensor(source), *extra).data * weights
        worst = max(worst, max_relative_error(grads[name], numeric_gradient(scalar, p.data),
                                              floor=1e-3))
    return worst


class TestFeedForward:
    def test_zero_weights_give_zero(self, rng):
        ffn = FeedForward(8, init64())
        zero_all(ffn)
        out = ffn(Tensor(rng.normal(size=(5, 8))))
        np.testing.assert_array_equal(out.data, np.zeros((5, 8)))

    @pytest.mark.parametrize("frames", [1, 4, 33])
    def test_shape_preserved(self, rng, frames):
        assert FeedForward(8, init64())(Tensor(rng.normal(size=(frames, 8)))).shape == (frames, 8)

    def test_parameter_shapes(self):
        ffn = FeedForward(8, init64())
        assert ffn.expand.weight.shape == (8, 32)
        assert ffn.project.weight.shape == (32, 8)

    def test_gradient_check(self, rng):
        assert module_gradient_error(FeedForward(8, init64()), rng.normal(size=(4, 8))) < 1e-6


class TestConvModule:
    def test_zero_input_zero_biases(self):
        conv = ConvModule(4, 3, init64())
        out = conv(Tensor(np.zeros((6, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((6, 4)))

    def test_future_perturbation_leaves_past(self, rng):
        conv = ConvModule(4, 3, init64(1))
        x = rng.normal(size=(6, 4))
        base = conv(Tensor(x)).data
        for t in range(5):
            bumped = x.copy()
            bumped[t + 1] += rng.normal(size=4)
            np.testing.assert_array_equal(conv(Tensor(bumped)).data[:t + 1], base[:t + 1])

    def test_matches_step_by_step_oracle(self, rng):
        conv = ConvModule(4, 3, init64(2))
        for p in conv.named_parameters().values():
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        x = rng.normal(size=(6, 4))

        h = layer_norm_rows(x, conv.norm.gain.data, conv.norm.bias.data)
        h = affine_rows(h, conv.pointwise_in)
        gated = np.zeros((6, 4))
        for t in range(6):
            for c in range(4):
                gated[t, c] = h[t, c] * sigmoid(h[t, c + 4])
        kernel = conv.depthwise.data
        conv_out = np.zeros((6, 4))
        for t in range(6):
            for c in range(4):
                conv_out[t, c] = sum(kernel[k, c] * gated[t - 2 + k, c]
                                     for k in range(3) if t - 2 + k >= 0)
        normed = layer_norm_rows(conv_out, conv.group_gain.data, conv.group_bias.data)
        activated = np.vectorize(lambda v: v * sigmoid(v))(normed)
        expected = affine_rows(activated, conv.pointwise_out)

        np.testing.assert_allclose(conv(Tensor(x)).data, expected, rtol=0, atol=1e-10)

    def test_gradient_check(self, rng):
        assert module_gradient_error(ConvModule(4, 3, init64(3)), rng.normal(size=(6, 4))) < 1e-6

    def test_invalid_kernel(self):
        with pytest.raises(ContractError):
            ConvModule(4, 0, init64())


class TestAttentionMask:
    def test_lookback_window(self):
        allowed = AttentionMask(lookback=2).allowed(5)
        assert allowed[4].tolist() == [False, False, True, True, True]
        assert allowed[0].tolist() == [True, False, False, False, False]

    def test_lookback_zero_is_diagonal(self):
        np.testing.assert_array_equal(AttentionMask(lookback=0).allowed(4), np.eye(4, dtype=bool))

    def test_unlimited_lookback(self):
        np.testing.assert_array_equal(AttentionMask(lookback=None).allowed(4),
                                      np.tril(np.ones((4, 4), dtype=bool)))

    def test_negative_lookback(self):
        with pytest.raises(ContractError):
            AttentionMask(lookback=-1)


class TestSelfAttention:
    def test_single_frame(self, rng):
        mhsa = MultiHeadSelfAttention(8, 2, init64())
        x = Tensor(rng.normal(size=(1, 8)))
        weights = mhsa.attention_weights(x, AttentionMask())
        np.testing.assert_array_equal(weights, np.ones((2, 1, 1)))
        h = mhsa.norm(x)
        expected = mhsa.output(mhsa.value(h)).data
        np.testing.assert_allclose(mhsa(x, AttentionMask()).data, expected, rtol=1e-12, atol=1e-14)

    def test_lookback_zero_attends_to_self(self, rng):
        mhsa = MultiHeadSelfAttention(8, 2, init64())
        x = Tensor(rng.normal(size=(5, 8)))
        weights = mhsa.attention_weights(x, AttentionMask(lookback=0))
        for head in weights:
            np.testing.assert_array_equal(head, np.eye(5))

    def test_zeroing_late_frames_keeps_early_output(self, rng):
        mhsa = MultiHeadSelfAttention(8, 2, init64(4))
        x = rng.normal(size=(80, 8))
        base = mhsa(Tensor(x), AttentionMask(lookback=64)).data
        cut = x.copy()
        cut[75:] = 0.0
        perturbed = mhsa(Tensor(cut), AttentionMask(lookback=64)).data
        np.testing.assert_array_equal(perturbed[10], base[10])
        np.testing.assert_array_equal(perturbed[:75], base[:75])

    def test_output_depends_only_on_lookback_window(self, rng):
        mhsa = MultiHeadSelfAttention(8, 2, init64(5))
        x = rng.normal(size=(12, 8))
        base = mhsa(Tensor(x), AttentionMask(lookback=3)).data
        far = x.copy()
        far[:5] = rng.normal(size=(5, 8))
        # 第 9 幀只看第 6..9 幀
        perturbed = mhsa(Tensor(far), AttentionMask(lookback=3)).data
        np.testing.assert_array_equal(perturbed[9:], base[9:])

    def test_weights_are_distributions(self, rng):
        mhsa = MultiHeadSelfAttention(8, 4, init64())
        weights = mhsa.attention_weights(Tensor(rng.normal(size=(10, 8))), AttentionMask(lookback=4))
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(weights >= 0.0)

    def test_heads_must_divide_dim(self):
        with pytest.raises(DimensionError):
            MultiHeadSelfAttention(10, 4, init64())

    def test_gradient_check(self, rng):
        error = module_gradient_error(MultiHeadSelfAttention(8, 2, init64(6)),
                                      rng.normal(size=(5, 8)), AttentionMask(lookback=2))
        assert error < 1e-6


def cross_attention_oracle(mhca, q_src, kv_src):
    """逐 head、逐 query 幀明確計算 softmax 加權和。"""
    q_in = layer_norm_rows(q_src, mhca.query_norm.gain.data, mhca.query_norm.bias.data)
    kv_in = layer_norm_rows(kv_src, mhca.context_norm.gain.data, mhca.context_norm.bias.data)
    q, k, v = affine_rows(q_in, mhca.query), affine_rows(kv_in, mhca.key), affine_rows(kv_in, mhca.value)
    d = q.shape[1]
    head_dim = d // mhca.heads
    merged = np.zeros((q.shape[0], d))
    for h in range(mhca.heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        for t in range(q.shape[0]):
            scores = [float(np.dot(q[t, cols], k[s, cols])) / math.sqrt(head_dim)
                      for s in range(k.shape[0])]
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            total = sum(exps)
            for s in range(k.shape[0]):
                merged[t, cols] += exps[s] / total * v[s, cols]
    return affine_rows(merged, mhca.output)


class TestCrossAttention:
    def test_single_context_frame_ignores_query(self, rng):
        mhca = MultiHeadCrossAttention(8, 2, init64())
        kv = Tensor(rng.normal(size=(1, 8)))
        expected = mhca.output(mhca.value(mhca.context_norm(kv))).data[0]
        for _ in range(2):
            out = mhca(Tensor(rng.normal(size=(4, 8))), kv).data
            for row in out:
                np.testing.assert_allclose(row, expected, rtol=1e-12, atol=1e-14)

    def test_identical_context_rows(self, rng):
        mhca = MultiHeadCrossAttention(8, 2, init64(1))
        row = rng.normal(size=(1, 8))
        kv = Tensor(np.repeat(row, 6, axis=0))
        expected = mhca.output(mhca.value(mhca.context_norm(Tensor(row)))).data[0]
        out = mhca(Tensor(rng.normal(size=(3, 8))), kv).data
        np.testing.assert_allclose(out, np.broadcast_to(expected, (3, 8)), rtol=1e-12, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        mhca = MultiHeadCrossAttention(8, 2, init64(2))
        for p in mhca.named_parameters().values():
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        q_src, kv_src = rng.normal(size=(3, 8)), rng.normal(size=(5, 8))
        np.testing.assert_allclose(mhca(Tensor(q_src), Tensor(kv_src)).data,
                                   cross_attention_oracle(mhca, q_src, kv_src),
                                   rtol=0, atol=1e-10)

    @pytest.mark.parametrize("context_frames", [1, 2, 50, 597, 1000])
    def test_output_length_follows_query(self, rng, context_frames):
        mhca = MultiHeadCrossAttention(8, 2, init64())
        out = mhca(Tensor(rng.normal(size=(7, 8))), Tensor(rng.normal(size=(context_frames, 8))))
        assert out.shape == (7, 8)

    def test_weights_are_distributions(self, rng):
        mhca = MultiHeadCrossAttention(8, 4, init64())
        weights = mhca.attention_weights(Tensor(rng.normal(size=(3, 8))),
                                         Tensor(rng.normal(size=(11, 8))))
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(weights >= 0.0)

    def test_empty_context(self, rng):
        mhca = MultiHeadCrossAttention(8, 2, init64())
        with pytest.raises(ContractError):
            mhca(Tensor(rng.normal(size=(3, 8))), Tensor(np.zeros((0, 8))))

    def test_padded_context_frames_are_ignored(self, rng):
        mhca = MultiHeadCrossAttention(8, 2, init64(3))
        q = rng.normal(size=(2, 3, 8))
        context = rng.normal(size=(2, 6, 8))
        valid = np.array([[True] * 6, [True] * 4 + [False] * 2])
        batched = mhca(Tensor(q), Tensor(context), valid).data
        alone = mhca(Tensor(q[1]), Tensor(context[1, :4])).data
        np.testing.assert_allclose(batched[1], alone, rtol=1e-12, atol=1e-12)

    def test_gradient_check(self, rng):
        error = module_gradient_error(MultiHeadCrossAttention(8, 2, init64(4)),
                                      rng.normal(size=(3, 8)), Tensor(rng.normal(size=(5, 8))))
        assert error < 1e-6


class TestFiLM:
    def test_identity_configuration_is_exact(self, rng):
        film = FiLM(3, init64())
        film.scale.weight.data[:] = 0.0
        film.scale.bias.data[:] = 1.0
        film.shift.weight.data[:] = 0.0
        film.shift.bias.data[:] = 0.0
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        np.testing.assert_array_equal(film(Tensor(x), Tensor(y)).data, x)

    def test_zero_scale_identity_shift_returns_y(self, rng):
        film = FiLM(3, init64())
        film.scale.weight.data[:] = 0.0
        film.scale.bias.data[:] = 0.0
        film.shift.weight.data[:] = np.eye(3)
        film.shift.bias.data[:] = 0.0
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(film(Tensor(x), Tensor(y)).data, y, rtol=1e-15)

    def test_matches_elementwise_oracle(self, rng):
        film = FiLM(3, init64())
        for p in film.named_parameters().values():
            p.data = rng.normal(size=p.shape)
        x, y = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        r = y @ film.scale.weight.data + film.scale.bias.data
        h = y @ film.shift.weight.data + film.shift.bias.data
        np.testing.assert_array_equal(film(Tensor(x), Tensor(y)).data, r * x + h)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            FiLM(3, init64())(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


class TestInitializer:
    def test_deterministic(self):
        a = Linear(6, 4, Initializer(7)).weight.data
        b = Linear(6, 4, Initializer(7)).weight.data
        np.testing.assert_array_equal(a, b)

    def test_glorot_uniform_range_and_zero_bias(self):
        layer = Linear(6, 4, Initializer(0))
        limit = math.sqrt(6.0 / 10.0)
        assert np.all(np.abs(layer.weight.data) <= limit)
        np.testing.assert_array_equal(layer.bias.data, np.zeros(4))
        assert layer.weight.dtype == np.float32

    def test_key_projection_has_no_bias(self):
        mhsa = MultiHeadSelfAttention(8, 2, init64())
        assert mhsa.key.bias is None
        assert "key.bias" not in mhsa.named_parameters()
        assert mhsa.num_parameters() == 4 * 64 + 5 * 8
