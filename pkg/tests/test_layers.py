import logging

import numpy as np
import pytest
from _oracles import dense_member_forward, random_ensemble_layer, rel_err

from fwens import tensor as T
from fwens.errors import ConfigError, ShapeError
from fwens.layers import (EnsembleLinear, InitSpec, LoraAdapter, LoraEnsembleLinear, make_lora_ensemble,
                          param_count)
from fwens.tensor import Tensor


class TestForward:
    def test_identity_fast_weights_is_plain_linear(self, rng):
        layer = EnsembleLinear(5, 3, M=3, U=rng.normal(size=(5, 3)), dtype=np.float64)
        x = rng.normal(size=(3, 4, 5))
        out = layer(Tensor(x)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], x[i] @ layer.U.data)

    def test_dense_oracle_small(self, rng):
        layer = random_ensemble_layer(rng, 3, 3, 2)
        x = rng.normal(size=(2, 6, 3))
        assert rel_err(layer(Tensor(x)).data, dense_member_forward(layer, x)) < 1e-5

    def test_zero_input_gives_bias(self, rng):
        layer = random_ensemble_layer(rng, 4, 3, 2)
        out = layer(Tensor(np.zeros((2, 5, 4)))).data
        np.testing.assert_allclose(out, np.broadcast_to(layer.bias.data[:, None], (2, 5, 3)))

    def test_member_mismatch(self, rng):
        layer = EnsembleLinear(4, 3, M=2)
        with pytest.raises(ShapeError):
            layer(Tensor(np.ones((3, 5, 4))))

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            EnsembleLinear(4, 3, M=2)(Tensor(np.ones((2, 5, 3))))

    def test_extra_leading_axes(self, rng):
        layer = random_ensemble_layer(rng, 4, 3, 2)
        x = rng.normal(size=(2, 2, 3, 4))
        flat = layer(Tensor(x.reshape(2, 6, 4))).data.reshape(2, 2, 3, 3)
        np.testing.assert_allclose(layer(Tensor(x)).data, flat)

    def test_effective_weight(self, rng):
        layer = random_ensemble_layer(rng, 4, 3, 2, adapter=True)
        ad = layer.adapter
        W = (layer.U.data + ad.scale * ad.B.data @ ad.A.data) * np.outer(layer.fast_r.data[1], layer.fast_s.data[1])
        np.testing.assert_allclose(layer.effective_weight(1), W)


class TestAdapter:
    def test_b_zero_at_creation(self):
        ad = LoraAdapter(6, 4, rank=2)
        assert not ad.B.data.any() and ad.B.shape == (6, 2) and ad.A.shape == (2, 4)

    def test_attach_keeps_output(self, rng):
        layer = random_ensemble_layer(rng, 4, 3, 2)
        x = Tensor(rng.normal(size=(2, 5, 4)))
        before = layer(x).data
        layer.attach_adapter()
        np.testing.assert_array_equal(layer(x).data, before)

    def test_scale_is_four_for_paper_setting(self, rng):
        ad = LoraAdapter(16, 16, rank=8, alpha=32)
        ad.B = Tensor(rng.normal(size=(16, 8)), dtype=ad.A.dtype)
        np.testing.assert_allclose(ad.delta_array(), 4 * (ad.B.data @ ad.A.data), rtol=1e-6)

    def test_a_variance(self):
        A = LoraAdapter(4, 20000, rank=4, seed=3).A.data
        assert A.var() == pytest.approx(1 / 4, rel=0.05)

    @pytest.mark.parametrize("kw", [{"rank": 0}, {"alpha": 0}])
    def test_bad_params(self, kw):
        with pytest.raises(ConfigError):
            LoraAdapter(4, 4, **kw)


class TestMerge:
    def test_b_zero_leaves_u_bitwise(self, rng):
        layer = random_ensemble_layer(rng, 5, 4, 2)
        U = layer.U.data.copy()
        layer.attach_adapter()
        assert layer.merge_adapter()
        assert layer.U.data.tobytes() == U.tobytes() and layer.adapter is None

    def test_no_adapter_is_noop_with_warning(self, rng, caplog):
        layer = random_ensemble_layer(rng, 3, 3, 1)
        U = layer.U.data.copy()
        with caplog.at_level(logging.WARNING):
            assert layer.merge_adapter() is False
        assert "nothing to merge" in caplog.text
        np.testing.assert_array_equal(layer.U.data, U)

    def test_merged_delta(self, rng):
        layer = random_ensemble_layer(rng, 6, 5, 2)
        ad = layer.attach_adapter(rank=8, alpha=32)
        ad.B = Tensor(rng.normal(size=(6, 8)), dtype=np.float64)
        U0 = layer.U.data.copy()
        layer.merge_adapter()
        np.testing.assert_allclose(layer.U.data - U0, 4 * (ad.B.data @ ad.A.data), rtol=1e-12)

    def test_forward_preserved(self, rng):
        layer = random_ensemble_layer(rng, 5, 4, 3, adapter=True)
        probes = [rng.normal(size=(3, 2, 5)) for _ in range(20)]
        before = [layer(Tensor(p)).data for p in probes]
        layer.merge_adapter()
        for p, b in zip(probes, before):
            assert rel_err(layer(Tensor(p)).data, b) < 1e-5


class TestInit:
    def test_zero_variance_is_exactly_mean(self):
        layer = EnsembleLinear(8, 8, M=3)
        layer.init_fast_weights(InitSpec(std_scale=0.0, mean=1.0))
        assert (layer.fast_r.data == 1).all() and (layer.fast_s.data == 1).all()

    def test_he_mean(self):
        layer = EnsembleLinear(64, 1, M=100000 // 64 + 1, dtype=np.float64)
        layer.init_fast_weights(InitSpec("he", mean=1.0, seed=5))
        r = layer.fast_r.data.reshape(-1)[:100000]
        assert abs(r.mean() - 1) < 3 * np.sqrt(2 / 64) / np.sqrt(1e5)

    def test_xavier_variance(self):
        layer = EnsembleLinear(64, 64, M=2000, dtype=np.float64)
        layer.init_fast_weights(InitSpec("xavier", mean=1.0, seed=1))
        assert layer.fast_r.data.var() == pytest.approx(2 / 128, rel=0.1)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            EnsembleLinear(4, 4, M=2).init_fast_weights(InitSpec("lecun"))

    def test_seeded(self):
        a, b = EnsembleLinear(4, 4, M=2), EnsembleLinear(4, 4, M=2)
        a.init_fast_weights(InitSpec(seed=9))
        b.init_fast_weights(InitSpec(seed=9))
        np.testing.assert_array_equal(a.fast_r.data, b.fast_r.data)


class TestTrainable:
    def test_frozen_u_count(self):
        m, n, M = 7, 5, 4
        layer = EnsembleLinear(m, n, M)
        layer.set_trainable(["fast_r", "fast_s", "bias"])
        assert layer.num_trainable() == M * (m + n) + M * n

    def test_gradients_reach_fast_weights_and_adapter_not_u(self, rng):
        layer = random_ensemble_layer(rng, 4, 3, 2, adapter=True)
        layer.set_trainable(["fast_r", "fast_s", "lora_A", "lora_B"])
        x = Tensor(rng.normal(size=(2, 5, 4)))
        w = Tensor(rng.normal(size=(2, 5, 3)))
        params = {k: p for k, p in layer.parameters().items() if p.requires_grad}
        err = T.gradcheck_params(lambda: (layer(x) * w).sum(), params)
        assert err < 1e-4
        layer(x).sum().backward()
        assert layer.U.grad is None


class TestParamCount:
    def test_single_layer(self):
        assert param_count([(8, 8)], 4, "vanilla") == 256
        assert param_count([(8, 8)], 4, "batch_ensemble") == 128

    def test_m1(self):
        assert param_count([(5, 7)], 1, "batch_ensemble") == 35 + 12

    def test_lora(self):
        assert param_count([(8, 8)], 4, "lora_ensemble", rank=2) == 192

    def test_bias(self):
        assert param_count([(8, 8)], 4, "batch_ensemble", include_bias=True) == 128 + 32

    def test_matches_materialised_layers(self):
        m, n, M = 6, 9, 3
        layer = EnsembleLinear(m, n, M)
        n_weights = layer.U.size + layer.fast_r.size + layer.fast_s.size
        assert param_count([(m, n)], M, "batch_ensemble") == n_weights
        lora = LoraEnsembleLinear(m, n, M, rank=2)
        assert param_count([(m, n)], M, "lora_ensemble", rank=2) == lora.U.size + lora.A.size + lora.B.size

    def test_errors(self):
        with pytest.raises(ConfigError):
            param_count([(2, 2)], 0, "vanilla")
        with pytest.raises(ConfigError):
            param_count([(2, 2)], 1, "bogus")


class TestLoraEnsemble:
    def test_members_identical_at_init(self, rng):
        layer = LoraEnsembleLinear(4, 3, 3, rank=2, U=rng.normal(size=(4, 3)), dtype=np.float64)
        x = np.broadcast_to(rng.normal(size=(1, 5, 4)), (3, 5, 4))
        out = layer(Tensor(x)).data
        np.testing.assert_allclose(out[0], out[1])
        np.testing.assert_allclose(out[0], x[0] @ layer.U.data)

    def test_dense_oracle(self, rng):
        layer = LoraEnsembleLinear(4, 3, 2, rank=2, dtype=np.float64)
        layer.B = Tensor(rng.normal(size=layer.B.shape), dtype=np.float64)
        layer.bias = Tensor(rng.normal(size=layer.bias.shape), dtype=np.float64)
        x = rng.normal(size=(2, 5, 4))
        ref = np.stack([x[i] @ layer.effective_weight(i) + layer.bias.data[i] for i in range(2)])
        assert rel_err(layer(Tensor(x)).data, ref) < 1e-5

    def test_make_lora_ensemble(self):
        layers = make_lora_ensemble([(4, 3), (3, 2)], M=2, rank=2)
        assert [(l.m, l.n, l.M) for l in layers] == [(4, 3, 2), (3, 2, 2)]
