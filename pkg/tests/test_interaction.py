import numpy as np
import pytest

from interformer import autograd as ag
from interformer.autograd import Tensor
from interformer.config import BACKBONES
from interformer.errors import ConfigError, DimensionError
from interformer.gradcheck import check_function
from interformer.interaction import (dcn_cross_layer, dhen_layer, dot_interaction, fm_second_order, init_dhen_layer,
                                     init_interaction_layer, interaction_arch_layer, interaction_param_count)
from interformer.layers import ParamStore


def fm_pairs(x, v, w, w0):
    """O(d^2) enumeration of the factorization-machine score."""
    d = len(x)
    s = w0
    for j in range(d):
        s += w[j] * x[j]
        for k in range(j + 1, d):
            s += float(np.dot(v[j], v[k])) * x[j] * x[k]
    return s


def dcn_loop(x0, xl, w, b):
    d = len(x0)
    out = np.empty(d)
    for i in range(d):
        acc = b[i]
        for j in range(d):
            acc += w[i, j] * xl[j]
        out[i] = x0[i] * acc + xl[i]
    return out


def layer_norm_np(y, gamma, beta, eps):
    mu = y.mean(-1, keepdims=True)
    var = ((y - mu) ** 2).mean(-1, keepdims=True)
    return (y - mu) / np.sqrt(var + eps) * gamma + beta


class TestFM:
    def test_zero_input_gives_bias(self, rng):
        out = fm_second_order(Tensor(np.zeros((1, 4))), Tensor(rng.normal(size=(4, 3))),
                              Tensor(rng.normal(size=(4, 1))), Tensor([[0.7]]))
        assert out.item() == 0.7

    def test_orthogonal_factors_leave_linear_part(self, rng):
        v = np.eye(4)[:, :4] * rng.uniform(1, 2, size=(1, 4))
        x, w = rng.normal(size=(1, 4)), rng.normal(size=(4, 1))
        out = fm_second_order(Tensor(x), Tensor(v), Tensor(w), Tensor([[0.1]])).item()
        assert out == pytest.approx(float((x @ w)[0, 0]) + 0.1, abs=1e-12)

    def test_pair_sum_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d, r = rng.integers(1, 9), rng.integers(1, 5)
            x, v = rng.normal(size=d), rng.normal(size=(d, r))
            w, w0 = rng.normal(size=d), rng.normal()
            fast = fm_second_order(Tensor(x[None]), Tensor(v), Tensor(w[:, None]), Tensor(w0)).item()
            assert abs(fast - fm_pairs(x, v, w, w0)) <= 1e-9

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fm_second_order(Tensor(np.ones((1, 4))), Tensor(np.ones((3, 2))), Tensor(np.ones((4, 1))), Tensor(0.0))


class TestDot:
    def test_orthonormal_columns(self, rng):
        Q, _ = np.linalg.qr(rng.normal(size=(5, 3)))
        out = dot_interaction(Tensor(Q)).data
        np.testing.assert_allclose(out, [[1, 0, 0, 1, 0, 1]], atol=1e-12)

    def test_duplicated_column(self, rng):
        X = rng.normal(size=(4, 3))
        X[:, 2] = X[:, 1]
        g = dot_interaction(Tensor(X)).data[0]
        # triu order: (0,0) (0,1) (0,2) (1,1) (1,2) (2,2)
        assert g[1] == g[2] and g[3] == g[4] == g[5]

    def test_loop_oracle(self, rng):
        X = rng.normal(size=(2, 4, 3))
        out = dot_interaction(Tensor(X)).data
        for b in range(2):
            ref = [sum(X[b, t, i] * X[b, t, j] for t in range(4)) for i in range(3) for j in range(i, 3)]
            np.testing.assert_allclose(out[b], ref, atol=1e-12)


class TestDCN:
    def test_zero_weights_are_identity(self, rng):
        x0, xl = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        out = dcn_cross_layer(Tensor(x0), Tensor(xl), Tensor(np.zeros((5, 5))), Tensor(np.zeros((1, 5))))
        np.testing.assert_array_equal(out.data, xl)

    def test_zero_xl(self, rng):
        x0, b = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
        out = dcn_cross_layer(Tensor(x0), Tensor(np.zeros((1, 5))), Tensor(rng.normal(size=(5, 5))), Tensor(b))
        np.testing.assert_allclose(out.data, x0 * b, atol=1e-15)

    def test_scalar_loop(self, rng):
        x0, xl, w, b = rng.normal(size=5), rng.normal(size=5), rng.normal(size=(5, 5)), rng.normal(size=5)
        out = dcn_cross_layer(Tensor(x0[None]), Tensor(xl[None]), Tensor(w), Tensor(b[None])).data[0]
        np.testing.assert_allclose(out, dcn_loop(x0, xl, w, b), atol=1e-12)

    def test_low_rank_equals_full(self, rng):
        x0, xl = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
        U, V, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.normal(size=(1, 6))
        low = dcn_cross_layer(Tensor(x0), Tensor(xl), (Tensor(U), Tensor(V)), Tensor(b)).data
        full = dcn_cross_layer(Tensor(x0), Tensor(xl), Tensor(U @ V.T), Tensor(b)).data
        np.testing.assert_allclose(low, full, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dcn_cross_layer(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), Tensor(np.ones((3, 3))),
                            Tensor(np.ones((1, 4))))


class TestDHEN:
    def _layer(self, small_cfg, modules=("dot", "dcn"), seed=0, d=4, N=3):
        p = ParamStore()
        init_dhen_layer(p, d, N, small_cfg, np.random.default_rng(seed), modules)
        return p

    def test_compositional_oracle(self, small_cfg, rng):
        p = self._layer(small_cfg)
        X = rng.normal(size=(4, 3))
        out = dhen_layer(Tensor(X), p, eps=1e-6).data
        flat = X.reshape(-1)
        dot = np.array([X[:, i] @ X[:, j] for i in range(3) for j in range(i, 3)])
        cross = flat.copy()
        i = 0
        while f"dcn.cross{i}.b" in p:
            c = p.scope(f"dcn.cross{i}")
            w = c["w"].data if "w" in c else c["u"].data @ c["v"].data.T
            cross = dcn_loop(flat, cross, w, c["b"].data[0])
            i += 1
        ens = np.concatenate([dot, cross]) @ p["proj.w"].data + p["proj.b"].data[0]
        short = flat @ p["shortcut.w"].data + p["shortcut.b"].data[0]
        ref = layer_norm_np(ens + short, p["gamma"].data[0], p["beta"].data[0], 1e-6)
        np.testing.assert_allclose(out, ref.reshape(4, 3), atol=1e-12)

    def test_single_module_without_shortcut(self, small_cfg, rng):
        p = self._layer(small_cfg, modules=("dot",))
        p["shortcut.w"].data[:] = 0
        p["shortcut.b"].data[:] = 0
        X = rng.normal(size=(4, 3))
        out = dhen_layer(Tensor(X), p, modules=("dot",), eps=1e-6).data
        dot = dot_interaction(Tensor(X)).data[0]
        ref = layer_norm_np(dot @ p["proj.w"].data + p["proj.b"].data[0], 1.0, 0.0, 1e-6)
        np.testing.assert_allclose(out.reshape(-1), ref, atol=1e-12)

    def test_zero_modules_leave_shortcut(self, small_cfg, rng):
        p = self._layer(small_cfg)
        p["proj.w"].data[:] = 0
        p["proj.b"].data[:] = 0
        X = rng.normal(size=(4, 3))
        out = dhen_layer(Tensor(X), p, eps=1e-6).data
        short = X.reshape(-1) @ p["shortcut.w"].data + p["shortcut.b"].data[0]
        np.testing.assert_allclose(out.reshape(-1), layer_norm_np(short, 1.0, 0.0, 1e-6), atol=1e-12)

    def test_empty_ensemble(self, small_cfg, rng):
        with pytest.raises(ConfigError):
            dhen_layer(Tensor(rng.normal(size=(4, 3))), self._layer(small_cfg), modules=())


class TestInteractionArch:
    @pytest.mark.parametrize("backbone", BACKBONES)
    @pytest.mark.parametrize("c_s", [0, 1, 3])
    def test_shape_preserved(self, small_cfg, backbone, c_s, rng):
        cfg = small_cfg.replace(backbone=backbone)
        p = ParamStore()
        init_interaction_layer(p, cfg, 5, c_s, rng)
        assert p.count() == interaction_param_count(cfg, 5, c_s)
        X = Tensor(rng.normal(size=(3, 4, 5)))
        s = Tensor(rng.normal(size=(3, 4, c_s)))
        assert interaction_arch_layer(X, s, p, cfg).shape == (3, 4, 5)

    @pytest.mark.parametrize("backbone", BACKBONES)
    def test_empty_summary_is_sole_path(self, small_cfg, backbone, rng):
        cfg = small_cfg.replace(backbone=backbone)
        p = ParamStore()
        init_interaction_layer(p, cfg, 5, 0, rng)
        X = Tensor(rng.normal(size=(2, 4, 5)))
        with_empty = interaction_arch_layer(X, Tensor(np.zeros((2, 4, 0))), p, cfg).data
        np.testing.assert_array_equal(with_empty, interaction_arch_layer(X, None, p, cfg).data)

    @pytest.mark.parametrize("backbone", BACKBONES)
    def test_summary_matters_and_gradients_check(self, small_cfg, backbone):
        cfg = small_cfg.replace(backbone=backbone)
        rng = np.random.default_rng(4)
        p = ParamStore()
        init_interaction_layer(p, cfg, 3, 2, rng)
        X = rng.normal(size=(2, 4, 3))
        s = rng.normal(size=(2, 4, 2))
        base = interaction_arch_layer(Tensor(X), Tensor(s), p, cfg).data
        s2 = s.copy()
        s2[0, 1, 1] += 0.5
        assert not np.allclose(interaction_arch_layer(Tensor(X), Tensor(s2), p, cfg).data[0], base[0])
        res = check_function("s_sum", lambda t: interaction_arch_layer(Tensor(X), t["s"], p, cfg), {"s": s}, seed=0)
        assert res.max_rel_err < 1e-4

    def test_dimension_mismatch(self, small_cfg, rng):
        p = ParamStore()
        init_interaction_layer(p, small_cfg, 3, 2, rng)
        with pytest.raises(DimensionError):
            interaction_arch_layer(Tensor(rng.normal(size=(1, 4, 3))), Tensor(rng.normal(size=(1, 5, 2))), p,
                                   small_cfg)

    def test_dcn_rank_rule(self, small_cfg, rng):
        # flattened width 4 * 10 = 40 >= 32 uses the rank-32 factorisation, 4 * 5 = 20 is full rank
        wide, narrow = ParamStore(), ParamStore()
        init_interaction_layer(wide, small_cfg.replace(backbone="dcnv2"), 8, 2, rng)
        init_interaction_layer(narrow, small_cfg.replace(backbone="dcnv2"), 3, 2, rng)
        assert wide["dcn.cross0.u"].shape == (40, 32)
        assert narrow["dcn.cross0.w"].shape == (20, 20)


def test_all_backbones_stack(small_cfg, rng):
    for backbone in BACKBONES:
        cfg = small_cfg.replace(backbone=backbone)
        X = Tensor(rng.normal(size=(2, 4, 3)))
        for layer in range(3):
            p = ParamStore()
            init_interaction_layer(p, cfg, 3, 2, rng)
            X = interaction_arch_layer(X, Tensor(rng.normal(size=(2, 4, 2))), p, cfg)
        assert X.shape == (2, 4, 3)
        assert np.isfinite(ag.sum_all(X).item())
