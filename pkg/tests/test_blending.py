import numpy as np
import pytest

from sense import blending
from sense.config import profile
from sense.model import init_params
from sense.numcore import Tensor, grad_check
from sense.numcore import functional as F


def blend_params(kind, seed=0, **kw):
    cfg = profile("tiny", block_kind=kind, **kw)
    params = {k: v for k, v in init_params(cfg, seed).items() if k.startswith("blend.")}
    return cfg, params


@pytest.fixture
def H():
    return np.random.default_rng(5).normal(size=(2, 4, 32)).astype(np.float32)


class TestAttention:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        w = blending.attention_weights(rng.normal(size=(3, 6, 8)), rng.normal(size=(3, 6, 8)))
        np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-6)
        assert np.all(w >= 0)

    def test_identical_keys_give_uniform_rows(self):
        q = np.random.default_rng(1).normal(size=(5, 4))
        k = np.tile(np.ones((1, 4)), (5, 1))
        np.testing.assert_allclose(blending.attention_weights(q, k), 0.2, rtol=1e-6)

    def test_single_station(self):
        cfg, params = blend_params("transformer")
        out = blending.mhsa(params, "blend.0.attn", np.ones((1, 1, 32), np.float32), cfg.n_heads)
        assert out.shape == (1, 1, 32)


class TestTransformer:
    def test_shape_preserved(self, H):
        cfg, params = blend_params("transformer")
        assert blending.feature_blending(params, cfg, H).shape == H.shape

    def test_permutation_equivariant(self, H):
        cfg, params = blend_params("transformer", n_blocks=2)
        perm = np.array([2, 0, 3, 1])
        out = blending.feature_blending(params, cfg, H).data
        out_p = blending.feature_blending(params, cfg, H[:, perm]).data
        np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-5, atol=1e-5)

    def test_zero_params_are_identity(self, H):
        cfg, params = blend_params("transformer")
        zeros = {k: Tensor(np.zeros(v.shape, np.float32)) for k, v in params.items()}
        np.testing.assert_array_equal(blending.feature_blending(zeros, cfg, H).data, H)

    def test_stations_interact(self, H):
        cfg, params = blend_params("transformer")
        bumped = H.copy()
        bumped[:, 3] += np.linspace(-1, 1, 32, dtype=np.float32)
        a = blending.feature_blending(params, cfg, H).data
        b = blending.feature_blending(params, cfg, bumped).data
        assert not np.allclose(a[:, 0], b[:, 0])

    def test_gradient(self):
        cfg, params = blend_params("transformer", d_model=8, n_heads=2, ffn_hidden=8)
        x = np.random.default_rng(2).normal(size=(1, 3, 8)).astype(np.float32)
        w = np.random.default_rng(3).normal(size=(1, 3, 8)).astype(np.float32)
        rep = grad_check(lambda t: F.sum(F.mul(blending.feature_blending(params, cfg, t), w)), x)
        assert rep.max_rel_error < 1e-3


class TestConformer:
    def test_shape_preserved(self, H):
        cfg, params = blend_params("conformer")
        assert blending.feature_blending(params, cfg, H).shape == H.shape

    def test_not_permutation_equivariant(self, H):
        cfg, params = blend_params("conformer", conformer_kernel=3)
        perm = np.array([2, 0, 3, 1])
        out = blending.feature_blending(params, cfg, H).data
        out_p = blending.feature_blending(params, cfg, H[:, perm]).data
        assert not np.allclose(out_p, out[:, perm], atol=1e-4)

    def test_single_station_with_wide_kernel(self):
        cfg, params = blend_params("conformer", conformer_kernel=7)
        out = blending.feature_blending(params, cfg, np.ones((1, 1, 32), np.float32))
        assert out.shape == (1, 1, 32) and np.all(np.isfinite(out.data))

    def test_gradient(self):
        cfg, params = blend_params("conformer", d_model=8, n_heads=2, ffn_hidden=8, conformer_kernel=3)
        x = np.random.default_rng(4).normal(size=(1, 3, 8)).astype(np.float32)
        w = np.random.default_rng(5).normal(size=(1, 3, 8)).astype(np.float32)
        rep = grad_check(lambda t: F.sum(F.mul(blending.feature_blending(params, cfg, t), w)), x)
        assert rep.max_rel_error < 1e-3
