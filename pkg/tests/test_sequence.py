import math

import numpy as np
import pytest

from interformer import autograd as ag
from interformer.autograd import Tensor
from interformer.errors import ConfigError, DimensionError
from interformer.gradcheck import check_function
from interformer.layers import ParamStore
from interformer.sequence import (init_attention, init_pffn, init_sequence_layer, multi_head_attention, pffn, pma,
                                  prepend_cls, rope, scaled_dot_attention, sequence_arch_layer)


def attention_loop(q, k, v, valid=None):
    """One query row at a time, softmax written out by hand."""
    n_q, n_k = q.shape[0], k.shape[0]
    valid = np.ones(n_k, bool) if valid is None else valid
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        s = [float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(n_k)]
        top = max(s[j] for j in range(n_k) if valid[j])
        e = [math.exp(s[j] - top) if valid[j] else 0.0 for j in range(n_k)]
        z = sum(e)
        for j in range(n_k):
            out[i] += e[j] / z * v[j]
    return out


def rope_loop(x, pos):
    out = x.copy()
    w = x.shape[1]
    for t in range(x.shape[0]):
        for i in range(w // 2):
            a = pos[t] * 10000.0 ** (-2 * i / w)
            c, s = math.cos(a), math.sin(a)
            out[t, 2 * i] = c * x[t, 2 * i] - s * x[t, 2 * i + 1]
            out[t, 2 * i + 1] = s * x[t, 2 * i] + c * x[t, 2 * i + 1]
    return out


def mha_loop(q_in, kv_in, p, valid=None):
    heads = []
    i = 0
    while f"q{i}" in p:
        heads.append(attention_loop(q_in @ p[f"q{i}"].data, kv_in @ p[f"k{i}"].data, kv_in @ p[f"v{i}"].data,
                                    valid))
        i += 1
    return np.concatenate(heads, axis=1) @ p["o"].data


class TestAttention:
    def test_single_key_returns_its_value(self, rng):
        v = rng.normal(size=(1, 3))
        out = scaled_dot_attention(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=(1, 2))), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v, 4, axis=0), atol=1e-15)

    def test_identical_keys_average_values(self, rng):
        k = np.repeat(rng.normal(size=(1, 4)), 5, axis=0)
        v = rng.normal(size=(5, 3))
        out = scaled_dot_attention(Tensor(rng.normal(size=(2, 4))), Tensor(k), Tensor(v))
        np.testing.assert_allclose(out.data, np.repeat(v.mean(0, keepdims=True), 2, axis=0), atol=1e-12)

    def test_masked_keys_get_zero_weight(self, rng):
        valid = np.array([[True, False, True, False, True]])
        v = rng.normal(size=(1, 5, 3))
        q, k = Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 5, 4)))
        out, w = scaled_dot_attention(q, k, Tensor(v), valid, return_weights=True)
        assert np.all(w.data[..., ~valid[0]] == 0.0)
        v2 = v.copy()
        v2[:, ~valid[0]] = 1e6
        np.testing.assert_array_equal(scaled_dot_attention(q, k, Tensor(v2), valid).data, out.data)

    def test_loop_oracle(self, rng):
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        valid = np.array([True, True, False, True, False, True])
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), valid).data
        np.testing.assert_allclose(out, attention_loop(q, k, v, valid), atol=1e-12)

    def test_shape_errors(self, rng):
        with pytest.raises(DimensionError):
            scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))
        with pytest.raises(DimensionError):
            scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))), Tensor(np.ones((5, 2))))


class TestMultiHead:
    def test_per_head_loop_oracle(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            d, T = 8, int(rng.integers(1, 7))
            p = ParamStore()
            init_attention(p, d, 4, 2, rng)
            x = rng.normal(size=(T, d))
            valid = rng.random(T) < 0.7
            valid[0] = True
            out = multi_head_attention(Tensor(x), Tensor(x), p, valid).data
            worst = max(worst, np.abs(out - mha_loop(x, x, p, valid)).max())
        assert worst <= 1e-10

    def test_one_head_is_plain_attention(self, rng):
        p = ParamStore()
        init_attention(p, 4, 1, 4, rng)
        x = rng.normal(size=(5, 4))
        plain = scaled_dot_attention(Tensor(x @ p["q0"].data), Tensor(x @ p["k0"].data), Tensor(x @ p["v0"].data))
        np.testing.assert_allclose(multi_head_attention(Tensor(x), Tensor(x), p).data, plain.data @ p["o"].data,
                                   atol=1e-12)

    def test_output_shape(self, rng):
        p = ParamStore()
        init_attention(p, 6, 3, 2, rng)
        out = multi_head_attention(Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 7, 6))), p)
        assert out.shape == (2, 3, 6)


class TestPMA:
    def test_returns_one_token_per_seed(self, rng):
        p = ParamStore()
        init_attention(p, 4, 2, 2, rng)
        for k in (1, 2, 5):
            out = pma(Tensor(rng.normal(size=(k, 4))), Tensor(rng.normal(size=(3, 6, 4))), p)
            assert out.shape == (3, k, 4)

    def test_constant_values_pass_through(self, rng):
        p = ParamStore()
        init_attention(p, 4, 2, 2, rng)
        row = rng.normal(size=(1, 4))
        S = np.repeat(row, 6, axis=0)
        out = pma(Tensor(rng.normal(size=(3, 4))), Tensor(S), p).data
        heads = np.concatenate([row @ p[f"v{i}"].data for i in range(2)], axis=1) @ p["o"].data
        np.testing.assert_allclose(out, np.repeat(heads, 3, axis=0), atol=1e-12)

    def test_equals_attention_from_seeds(self, rng):
        p = ParamStore()
        init_attention(p, 4, 2, 2, rng)
        seeds, S = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
        valid = np.array([False, True, True, True, True])
        np.testing.assert_array_equal(pma(Tensor(seeds), Tensor(S), p, valid).data,
                                      multi_head_attention(Tensor(seeds), Tensor(S), p, valid).data)

    def test_needs_a_seed(self, rng):
        p = ParamStore()
        init_attention(p, 4, 2, 2, rng)
        with pytest.raises(ConfigError):
            pma(Tensor(np.zeros((0, 4))), Tensor(rng.normal(size=(5, 4))), p)


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.normal(size=(3, 6))
        np.testing.assert_array_equal(rope(Tensor(x), np.zeros(3)).data, x)

    def test_loop_oracle(self, rng):
        x, pos = rng.normal(size=(5, 8)), np.array([0, 1, 2, 7, 30])
        np.testing.assert_allclose(rope(Tensor(x), pos).data, rope_loop(x, pos), atol=1e-12)

    def test_isometry(self, rng):
        x = rng.normal(size=(2, 9, 8))
        y = rope(Tensor(x), np.arange(9)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-12)

    def test_relative_position(self, rng):
        q, k = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))

        def score(m, n):
            return (rope(Tensor(q), [m]).data @ rope(Tensor(k), [n]).data.T)[0, 0]

        for m, n, s in [(0, 3, 4), (5, 2, 10), (1, 1, 3)]:
            assert score(m, n) == pytest.approx(score(m + s, n + s), abs=1e-10)

    def test_odd_width(self, rng):
        with pytest.raises(ConfigError):
            rope(Tensor(rng.normal(size=(2, 5))), [0, 1])

    def test_position_count(self, rng):
        with pytest.raises(DimensionError):
            rope(Tensor(rng.normal(size=(3, 4))), [0, 1])


class TestPFFN:
    def test_initial_transform_is_identity(self, rng):
        p = ParamStore()
        init_pffn(p, 4, 2, 5, rng)
        S = rng.normal(size=(3, 4, 6))
        out = pffn(Tensor(rng.normal(size=(3, 4, 2))), Tensor(S), p).data
        np.testing.assert_allclose(out, S, atol=1e-15)

    def test_zero_sequence(self, rng):
        p = ParamStore()
        init_pffn(p, 4, 2, 5, rng)
        p["f2.w"].data[:] = rng.normal(size=p["f2.w"].shape)
        out = pffn(Tensor(rng.normal(size=(2, 4, 2))), Tensor(np.zeros((2, 4, 3))), p).data
        assert np.all(out == 0.0)

    def test_per_example_transform(self, rng):
        p = ParamStore()
        init_pffn(p, 3, 2, 4, rng)
        p["f2.w"].data[:] = rng.normal(size=p["f2.w"].shape)
        xs, S = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 3, 5))
        out = pffn(Tensor(xs), Tensor(S), p).data
        for b in range(2):
            z = xs[b].reshape(1, -1) @ p["f1.w"].data + p["f1.b"].data
            h = z / (1 + np.exp(-z))
            W = (h @ p["f2.w"].data + p["f2.b"].data).reshape(3, 3)
            np.testing.assert_allclose(out[b], W @ S[b], atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        p = ParamStore()
        init_pffn(p, 4, 2, 3, rng)
        p["f2.w"].data[:] = rng.normal(size=p["f2.w"].shape)
        inputs = {"xs": rng.normal(size=(2, 4, 2)), "S": rng.normal(size=(2, 4, 3))}
        res = check_function("pffn", lambda t: pffn(t["xs"], t["S"], p), inputs, seed=0)
        assert res.passed

    def test_dimension_mismatch(self, rng):
        p = ParamStore()
        init_pffn(p, 4, 2, 3, rng)
        with pytest.raises(DimensionError):
            pffn(Tensor(rng.normal(size=(1, 3, 2))), Tensor(rng.normal(size=(1, 4, 3))), p)


class TestPrependCls:
    @pytest.mark.parametrize("n_cls", [0, 1, 4])
    def test_columns_and_copy(self, rng, n_cls):
        S = rng.normal(size=(2, 4, 5))
        cls = rng.normal(size=(2, 4, n_cls))
        out = prepend_cls(Tensor(cls), Tensor(S))
        assert out.shape == (2, 4, 5 + n_cls)
        np.testing.assert_array_equal(out.data[..., :n_cls], cls)
        np.testing.assert_array_equal(out.data[..., n_cls:], S)
        out.data[...] = 0.0
        assert np.all(S != 0.0)

    def test_none(self, rng):
        S = Tensor(rng.normal(size=(4, 3)))
        assert prepend_cls(None, S) is S

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            prepend_cls(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 5))))


class TestSequenceLayer:
    def _layer(self, cfg, seed):
        p = ParamStore()
        init_sequence_layer(p, cfg, np.random.default_rng(seed))
        return p

    def test_shape_across_stack(self, small_cfg, rng):
        S = Tensor(rng.normal(size=(3, 4, 7)))
        mask = np.ones((3, 7), bool)
        mask[0, :3] = False
        for layer in range(3):
            xs = Tensor(rng.normal(size=(3, 4, small_cfg.n_sum)))
            S = sequence_arch_layer(S, xs, self._layer(small_cfg, layer), mask, np.arange(7))
        assert S.shape == (3, 4, 7)

    def test_compositional_oracle(self, small_cfg, rng):
        p = self._layer(small_cfg, 0)
        p["pffn.f2.w"].data[:] = rng.normal(scale=0.3, size=p["pffn.f2.w"].shape)
        S, xs = rng.normal(size=(2, 4, 5)), rng.normal(size=(2, 4, 2))
        valid = np.array([[True] * 5, [False, False, True, True, True]])
        pos = np.arange(5)
        out = sequence_arch_layer(Tensor(S), Tensor(xs), p, valid, pos).data
        for b in range(2):
            U = pffn(Tensor(xs[b]), Tensor(S[b]), p.scope("pffn")).data.T
            mu, var = U.mean(1, keepdims=True), U.var(1, keepdims=True)
            H = (U - mu) / np.sqrt(var + 1e-6)
            heads = []
            for i in range(small_cfg.heads):
                q = rope_loop(H @ p[f"mha.q{i}"].data, pos)
                k = rope_loop(H @ p[f"mha.k{i}"].data, pos)
                heads.append(attention_loop(q, k, H @ p[f"mha.v{i}"].data, valid[b]))
            A = np.concatenate(heads, axis=1) @ p["mha.o"].data
            np.testing.assert_allclose(out[b], (U + A).T, atol=1e-12)

    def test_padding_is_invisible_to_valid_tokens(self, small_cfg, rng):
        p = self._layer(small_cfg, 1)
        S, xs = rng.normal(size=(1, 4, 6)), Tensor(rng.normal(size=(1, 4, 2)))
        valid = np.array([[False, False, True, True, True, True]])
        base = sequence_arch_layer(Tensor(S), xs, p, valid, np.arange(6)).data
        S[..., :2] = rng.normal(size=(1, 4, 2)) * 100
        moved = sequence_arch_layer(Tensor(S), xs, p, valid, np.arange(6)).data
        np.testing.assert_array_equal(moved[..., 2:], base[..., 2:])

    def test_finite_differences(self, small_cfg):
        rng = np.random.default_rng(5)
        p = self._layer(small_cfg, 2)
        valid = np.array([[True, True, True, True], [False, True, True, True]])
        inputs = {"S": rng.normal(size=(2, 4, 4)), "xs": rng.normal(size=(2, 4, 2))}
        res = check_function("seq_layer", lambda t: sequence_arch_layer(t["S"], t["xs"], p, valid, np.arange(4)),
                             inputs, seed=1)
        assert res.passed


def test_attention_weights_sum_to_one(rng):
    logits = rng.normal(size=(3, 4, 6)) * 50
    w = ag.softmax_rows(Tensor(logits)).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
