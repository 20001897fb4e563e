import numpy as np
import pytest

from interformer.autograd import Tensor
from interformer.cross import (init_gating, init_nonseq_summary, init_seq_summary, lce, recent_tokens, self_gating,
                               summarize_nonseq, summarize_seq)
from interformer.errors import ConfigError, DimensionError
from interformer.layers import ParamStore


def seq_mask(lens, n_cls, T):
    lens = np.asarray(lens)
    return np.concatenate([np.ones((len(lens), n_cls), bool), np.arange(T)[None, :] >= T - lens[:, None]], axis=1)


class TestGating:
    def test_starts_as_identity(self, rng):
        p = ParamStore()
        init_gating(p, 3, 4, rng)
        X = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(self_gating(Tensor(X), p).data, X)

    def test_zero_bias_kills_signal(self, rng):
        p = ParamStore()
        init_gating(p, 3, 4, rng)
        p["gate.b"].data[:] = 0.0
        assert np.all(self_gating(Tensor(rng.normal(size=(2, 3, 4))), p).data == 0.0)

    def test_sigmoid_of_identity_gate(self, rng):
        p = ParamStore()
        init_gating(p, 2, 2, rng)
        X = rng.normal(size=(2, 2))
        np.testing.assert_allclose(self_gating(Tensor(X), p, "sigmoid").data, 1 / (1 + np.exp(-X)), atol=1e-15)

    def test_elementwise_loop(self, rng):
        p = ParamStore()
        init_gating(p, 2, 3, rng)
        p["gate.w"].data[:] = rng.normal(size=(6, 6))
        X = rng.normal(size=(2, 3))
        g = X.reshape(-1) @ p["gate.w"].data + p["gate.b"].data[0]
        np.testing.assert_allclose(self_gating(Tensor(X), p).data.reshape(-1), X.reshape(-1) * g, atol=1e-12)


class TestLCE:
    def test_identity_keeps_columns(self, rng):
        X = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(lce(Tensor(X), Tensor(np.eye(4)[:, :2])).data, X[:, :2])

    def test_mean_column(self, rng):
        X = rng.normal(size=(3, 5))
        np.testing.assert_allclose(lce(Tensor(X), Tensor(np.full((5, 1), 0.2))).data[:, 0], X.mean(1), atol=1e-15)

    def test_triple_loop(self, rng):
        X, W = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
        ref = np.array([[sum(X[i, n] * W[n, m] for n in range(6)) for m in range(3)] for i in range(4)])
        np.testing.assert_allclose(lce(Tensor(X), Tensor(W)).data, ref, atol=1e-12)

    def test_cannot_expand(self, rng):
        with pytest.raises(ConfigError):
            lce(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(2, 4))))

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            lce(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(4, 2))))


class TestNonseqSummary:
    @pytest.mark.parametrize("n_out", [1, 3, 7])
    def test_arity(self, rng, n_out):
        p = ParamStore()
        init_nonseq_summary(p, 4, 8, n_out, rng)
        assert summarize_nonseq(Tensor(rng.normal(size=(2, 4, 8))), p).shape == (2, 4, n_out)

    def test_initial_output_is_compression(self, rng):
        p = ParamStore()
        init_nonseq_summary(p, 4, 6, 2, rng)
        X = rng.normal(size=(4, 6))
        np.testing.assert_allclose(summarize_nonseq(Tensor(X), p).data, X @ p["lce"].data, atol=1e-15)

    @pytest.mark.parametrize("n_out", [6, 9])
    def test_must_compress(self, rng, n_out):
        with pytest.raises(ConfigError):
            init_nonseq_summary(ParamStore(), 4, 6, n_out, rng)


class TestSeqSummary:
    def _store(self, cfg, seed=0):
        p = ParamStore()
        init_seq_summary(p, cfg, np.random.default_rng(seed))
        return p

    def test_fixed_arity(self, small_cfg, rng):
        cfg = small_cfg.replace(n_cls=4, n_pma=2, n_recent=2)
        p = self._store(cfg)
        T = 6
        for lens in ([0, 0], [1, 6], [3, 2]):
            S = Tensor(rng.normal(size=(2, 4, 4 + T)))
            out = summarize_seq(S, 4, 2, 2, p, seq_mask(lens, 4, T), np.array(lens))
            assert out.shape == (2, 4, 8)

    def test_single_recent_is_last_column(self, small_cfg, rng):
        cfg = small_cfg.replace(n_cls=0, n_pma=0, n_recent=1)
        p = self._store(cfg)
        S = rng.normal(size=(2, 4, 5))
        out = summarize_seq(Tensor(S), 0, 0, 1, p, seq_mask([5, 2], 0, 5), np.array([5, 2])).data
        np.testing.assert_array_equal(out[..., 0], S[..., -1])

    def test_cls_block_passes_through(self, small_cfg, rng):
        p = self._store(small_cfg)
        S = rng.normal(size=(2, 4, 2 + 5))
        out = summarize_seq(Tensor(S), 2, 1, 2, p, seq_mask([3, 5], 2, 5), np.array([3, 5])).data
        np.testing.assert_array_equal(out[..., :2], S[..., :2])

    def test_empty_history(self, small_cfg, rng):
        p = self._store(small_cfg)
        S = rng.normal(size=(1, 4, 2 + 4))
        out = summarize_seq(Tensor(S), 2, 1, 2, p, seq_mask([0], 2, 4), np.array([0])).data
        assert np.all(np.isfinite(out))
        assert np.all(out[..., 3:] == 0.0)
        # PMA only sees CLS tokens, so the padded history does not matter
        S2 = S.copy()
        S2[..., 2:] = 99.0
        np.testing.assert_array_equal(summarize_seq(Tensor(S2), 2, 1, 2, p, seq_mask([0], 2, 4), np.array([0])).data,
                                      out)

    def test_recent_tokens_zero_padded(self, rng):
        S = rng.normal(size=(3, 2, 1 + 4))
        out = recent_tokens(Tensor(S), 1, 3, np.array([4, 1, 0])).data
        np.testing.assert_array_equal(out[0], S[0, :, -3:])
        np.testing.assert_array_equal(out[1], np.concatenate([np.zeros((2, 2)), S[1, :, -1:]], axis=1))
        assert np.all(out[2] == 0.0)

    def test_recent_longer_than_sequence(self, rng):
        S = rng.normal(size=(1, 2, 3))
        out = recent_tokens(Tensor(S), 0, 5, np.array([3])).data
        np.testing.assert_array_equal(out[0], np.concatenate([np.zeros((2, 2)), S[0]], axis=1))

    def test_mask_width_checked(self, small_cfg, rng):
        p = self._store(small_cfg)
        with pytest.raises(DimensionError):
            summarize_seq(Tensor(rng.normal(size=(1, 4, 6))), 2, 1, 2, p, np.ones((1, 5), bool), np.array([4]))

    def test_needs_a_token(self, small_cfg, rng):
        with pytest.raises(ConfigError):
            summarize_seq(Tensor(rng.normal(size=(1, 4, 3))), 0, 0, 0, ParamStore(), np.ones((1, 3), bool),
                          np.array([3]))
