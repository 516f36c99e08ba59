import math

import numpy as np
import pytest

from sense import encoder
from sense.config import FULL_STACK, TINY_STACK, ModelConfig, conv_output_size, profile, trace_conv_shapes
from sense.datagen import GeneratorConfig, generate_catalog
from sense.model import init_params
from sense.numcore import Tensor
from sense.numcore import functional as F


@pytest.fixture(scope="module")
def tiny():
    cfg = profile("tiny")
    return cfg, init_params(cfg, seed=0)


class TestConvShapes:
    # Hand traces of the full stack (length, then channels):
    #   T=4000:  800 -> 785 x 1 comp x 32 -> 154 -> 77 -> 62 -> 31 -> 24 -> 12 -> 5 -> 2 (x16)
    #   T=12000: 2400 -> 2385 -> 474 -> 237 -> 222 -> 111 -> 104 -> 52 -> 45 -> 42 (x16)
    #   T=3000:  600 -> 585 -> 114 -> 57 -> 42 -> 21 -> 14 -> 7, too short for the k=8 layer
    def test_4000(self):
        shapes = trace_conv_shapes(FULL_STACK, 4000)
        assert shapes[0] == (800, 3, 8)
        assert shapes[1] == (785, 1, 32)
        assert shapes[2] == (785, 32)
        assert [s[0] for s in shapes[3:]] == [154, 77, 62, 31, 24, 12, 5, 2]
        assert conv_output_size(FULL_STACK, 4000) == 32

    def test_12000(self):
        assert trace_conv_shapes(FULL_STACK, 12000)[-1] == (42, 16)
        assert conv_output_size(FULL_STACK, 12000) == 672

    def test_3000_rejected_at_named_layer(self):
        with pytest.raises(ValueError, match=r"layer 9 \(conv1d, 32 filters, kernel 8"):
            trace_conv_shapes(FULL_STACK, 3000)

    def test_config_rejects_short_window(self):
        with pytest.raises(ValueError, match="layer"):
            ModelConfig(window_samples=3000)

    def test_tiny_stack(self):
        assert trace_conv_shapes(TINY_STACK, 500)[-1][0] >= 1

    def test_forward_shape_matches_trace(self, tiny):
        cfg, params = tiny
        out = encoder.conv_module_forward(params, cfg, np.zeros((2, 3, cfg.window_samples), np.float32))
        assert out.shape == (2, cfg.d_model)
        flat = conv_output_size(cfg.conv_stack, cfg.window_samples)
        assert params["conv.proj.weight"].shape == (flat, cfg.d_model)


class TestConvModule:
    def test_zero_input_identical_across_stations(self, tiny):
        cfg, params = tiny
        out = encoder.conv_module_forward(params, cfg, np.zeros((3, 3, cfg.window_samples), np.float32)).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])
        assert np.all(np.isfinite(out))

    def test_pure(self, tiny):
        cfg, params = tiny
        x = np.random.default_rng(0).normal(size=(1, 3, cfg.window_samples)).astype(np.float32)
        a = encoder.conv_module_forward(params, cfg, x).data
        b = encoder.conv_module_forward(params, cfg, x.copy()).data
        assert a.tobytes() == b.tobytes()

    def test_shift_changes_output(self, tiny):
        cfg, params = tiny
        x = np.zeros((2, 3, cfg.window_samples), np.float32)
        x[0, 0, 200] = 5.0
        x[1, 0, 205] = 5.0
        out = encoder.conv_module_forward(params, cfg, x).data
        assert not np.allclose(out[0], out[1])

    def test_wrong_length_rejected(self, tiny):
        cfg, params = tiny
        with pytest.raises(ValueError, match="window_samples"):
            encoder.conv_module_forward(params, cfg, np.zeros((1, 3, 400), np.float32))


class TestPositionalEncoding:
    def test_block_sizes(self):
        assert encoder.pe_block_sizes(128) == (44, 42, 42)
        assert encoder.pe_block_sizes(500) == (168, 166, 166)
        assert encoder.pe_block_sizes(32) == (12, 10, 10)
        for d in range(6, 200, 2):
            s = encoder.pe_block_sizes(d)
            assert sum(s) == d and all(v % 2 == 0 for v in s) and 0 <= s[0] - s[1] <= 4 and s[1] == s[2]

    def test_zero_coordinates(self):
        cfg = profile("desk")
        g = encoder.positional_encoding(np.zeros((1, 3)), cfg)[0]
        np.testing.assert_array_equal(g[0::2], 0.0)
        np.testing.assert_array_equal(g[1::2], 1.0)

    def test_bounded(self):
        cfg = profile("desk")
        g = encoder.positional_encoding(np.random.default_rng(0).normal(size=(20, 3)) * 100, cfg)
        assert np.all((g ** 2).sum(axis=1) <= cfg.d_model + 1e-4)

    def test_scalar_reevaluation(self):
        cfg = profile("desk")
        g = encoder.positional_encoding(np.array([[121.5, 25.0, 10.0]]), cfg)[0]
        # lon block: 22 pairs on 0.01..10 deg; lat block 21 pairs, height block 21 pairs on 1..1000 m
        lam_lon = 0.01 * (10 / 0.01) ** (5 / 21)
        assert g[10] == pytest.approx(math.sin(121.5 / lam_lon), abs=1e-6)
        lam_lat = 0.01 * (10 / 0.01) ** (20 / 20)
        assert g[44 + 41] == pytest.approx(math.cos(25.0 / lam_lat), abs=1e-6)
        lam_h = 1.0 * 1000.0 ** (3 / 20)
        assert g[86 + 6] == pytest.approx(math.sin(10.0 / lam_h), abs=1e-6)

    def test_generated_stations_distinct(self):
        cat = generate_catalog(GeneratorConfig(n_events=0))
        g = encoder.positional_encoding(cat.coords, profile("desk")).astype(np.float64)
        d = np.sqrt(((g[:, None] - g[None]) ** 2).sum(-1)) + np.eye(len(g))
        assert d.min() > 1e-6

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            encoder.positional_encoding(np.array([[np.nan, 0, 0]]), profile("desk"))


class TestFusion:
    def test_half_is_mean(self):
        W = Tensor(np.array([[2.0, 4.0]], np.float32))
        G = Tensor(np.array([[0.0, 1.0]], np.float32))
        params = {"fusion.logits": Tensor(np.zeros(3, np.float32))}
        alpha = encoder.fusion_alpha(params, [1])
        np.testing.assert_allclose(encoder.fuse(W, G, alpha).data, [[1.0, 2.5]])

    def test_large_logit_selects_waveform(self):
        params = {"fusion.logits": Tensor(np.array([30.0], np.float32))}
        W, G = np.ones((1, 4), np.float32), np.zeros((1, 4), np.float32)
        np.testing.assert_allclose(encoder.fuse(W, G, encoder.fusion_alpha(params, [0])).data, W)

    def test_fixed_point(self):
        params = {"fusion.logits": Tensor(np.array([-1.3, 0.7], np.float32))}
        W = np.random.default_rng(0).normal(size=(2, 5)).astype(np.float32)
        np.testing.assert_allclose(encoder.fuse(W, W, encoder.fusion_alpha(params, [0, 1])).data, W, rtol=1e-6)

    def test_alpha_in_open_interval(self):
        params = {"fusion.logits": Tensor(np.array([-8.0, 0.0, 8.0], np.float32))}
        a = encoder.fusion_alpha(params, [0, 1, 2]).data
        assert np.all((a > 0) & (a < 1))

    def test_pinned_alpha_leaves_logits_off_tape(self):
        logits = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        a = encoder.fusion_alpha({"fusion.logits": logits}, [0, 1], pinned=0.5)
        np.testing.assert_array_equal(a.data, 0.5)
        assert not a.requires_grad

    def test_unknown_station(self):
        with pytest.raises(IndexError):
            encoder.fusion_alpha({"fusion.logits": Tensor(np.zeros(2, np.float32))}, [2])


class TestLocality:
    def test_zero_table_identity(self):
        H = np.random.default_rng(0).normal(size=(1, 3, 4)).astype(np.float32)
        out = encoder.add_locality(H, Tensor(np.zeros((3, 4), np.float32)), [0, 1, 2])
        np.testing.assert_array_equal(out.data, H)

    def test_row_difference(self):
        table = Tensor(np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32))
        H = np.ones((1, 2, 3), np.float32)
        out = encoder.add_locality(H, table, [1, 3]).data[0]
        np.testing.assert_allclose(out[0] - out[1], table.data[1] - table.data[3], rtol=1e-6)

    def test_gradient_only_on_present_rows(self):
        table = Tensor(np.random.default_rng(2).normal(size=(5, 3)).astype(np.float32), requires_grad=True)
        H = np.random.default_rng(3).normal(size=(1, 2, 3)).astype(np.float32)
        F.sum(F.mul(encoder.add_locality(H, table, [1, 4]), 2.0)).backward()
        assert np.all(table.grad[[0, 2, 3]] == 0)
        assert np.all(table.grad[[1, 4]] != 0)
