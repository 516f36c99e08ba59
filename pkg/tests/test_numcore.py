import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _cases import PRIMITIVES
from sense.numcore import Tensor, grad_check, graph, no_grad, relative_error
from sense.numcore import functional as F


def t32(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=grad)


class TestForwardExamples:
    def test_conv1d_sum_of_ones(self):
        out = F.conv1d(np.ones((1, 5, 1), np.float32), np.ones((1, 1, 5), np.float32), stride=5)
        assert out.shape == (1, 1, 1)
        assert out.data.item() == 5.0

    def test_softmax_uniform(self):
        np.testing.assert_allclose(F.softmax(t32([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_layer_norm_constant_is_zero(self):
        out = F.layer_norm(t32(np.full((2, 7), 3.25)))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_array_equal(out.data, 0.0)

    @pytest.mark.parametrize("L,k,s", [(10, 3, 1), (10, 3, 3), (11, 4, 2), (4, 4, 7)])
    def test_conv_output_length(self, L, k, s):
        out = F.conv1d(np.zeros((1, L, 2), np.float32), np.zeros((3, 2, k), np.float32), stride=s)
        assert out.shape == (1, (L - k) // s + 1, 3)

    def test_conv2d_output_shape(self):
        out = F.conv2d(np.zeros((2, 20, 3, 8), np.float32), np.zeros((32, 8, 16, 3), np.float32), stride=(1, 3))
        assert out.shape == (2, 5, 1, 32)

    def test_max_pool_picks_window_max(self):
        x = np.array([[[1.0], [5.0], [2.0], [2.0], [7.0]]], np.float32)
        np.testing.assert_array_equal(F.max_pool1d(x, 2, 2).data[0, :, 0], [5.0, 2.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 40, 3)).astype(np.float32)
        w = rng.normal(size=(4, 3, 5)).astype(np.float32)
        a = F.softmax(F.conv1d(x, w, stride=2), axis=1).data
        b = F.softmax(F.conv1d(x, w, stride=2), axis=1).data
        assert a.tobytes() == b.tobytes()


class TestShapeErrors:
    def test_conv1d_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError) as exc:
            F.conv1d(np.zeros((1, 10, 3), np.float32), np.zeros((2, 4, 3), np.float32))
        assert "(1, 10, 3)" in str(exc.value) and "(2, 4, 3)" in str(exc.value)

    def test_conv1d_empty_output(self):
        with pytest.raises(ValueError, match="empty"):
            F.conv1d(np.zeros((1, 3, 1), np.float32), np.zeros((1, 1, 5), np.float32))

    def test_conv2d_empty_output(self):
        with pytest.raises(ValueError, match="empty"):
            F.conv2d(np.zeros((1, 4, 2, 1), np.float32), np.zeros((1, 1, 3, 3), np.float32))

    def test_matmul_mismatch(self):
        with pytest.raises(ValueError):
            F.matmul(t32(np.zeros((2, 3))), t32(np.zeros((4, 2))))

    def test_broadcast_mismatch(self):
        with pytest.raises(ValueError):
            F.add(t32(np.zeros((2, 3))), t32(np.zeros((4,))))


class TestBackward:
    def test_square_sum(self):
        x = t32([1.0, 2.0], grad=True)
        F.sum(F.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_sigmoid_at_zero(self):
        x = t32(0.0, grad=True)
        F.sigmoid(x).backward()
        assert x.grad == pytest.approx(0.25)

    def test_non_scalar_rejected(self):
        x = t32([1.0, 2.0], grad=True)
        with pytest.raises(ValueError, match="scalar"):
            F.mul(x, x).backward()

    def test_second_backward_rejected(self):
        x = t32([1.0, 2.0], grad=True)
        loss = F.sum(F.mul(x, x))
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_stale_leaf_grad_rejected(self):
        x = t32([1.0, 2.0], grad=True)
        F.sum(x).backward()
        with pytest.raises(RuntimeError):
            F.sum(F.mul(x, x)).backward()
        x.zero_grad()
        F.sum(F.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_constants_never_receive_grads(self):
        x = t32([1.0, -2.0], grad=True)
        c = t32([3.0, 4.0])
        F.sum(F.mul(x, c)).backward()
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])

    def test_no_grad_records_nothing(self):
        x = t32([1.0, 2.0], grad=True)
        with no_grad():
            y = F.sum(F.mul(x, x))
        assert not y.requires_grad

    def test_grads_are_finite_and_shaped(self):
        rng = np.random.default_rng(0)
        w = t32(rng.normal(size=(4, 3)), grad=True)
        x = t32(rng.normal(size=(5, 4)))
        F.mean(F.softmax(F.matmul(x, w))).backward()
        assert w.grad.shape == w.shape
        assert np.all(np.isfinite(w.grad))

    def test_shared_subexpression_accumulates(self):
        x = t32(3.0, grad=True)
        y = F.mul(x, x)
        F.add(y, y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_graph_is_topological(self):
        rng = np.random.default_rng(1)
        w = t32(rng.normal(size=(3, 3)), grad=True)
        x = t32(rng.normal(size=(2, 3)))
        loss = F.sum(F.tanh(F.matmul(F.relu(F.matmul(x, w)), w)))
        nodes = graph(loss)
        produced = {n.output for n in nodes}
        seen = set()
        for node in nodes:
            # every recorded input is a leaf or was produced earlier
            assert all(i in seen or i not in produced for i in node.inputs)
            seen.add(node.output)
        assert nodes[-1].output == id(loss)


class TestGradCheck:
    def test_sum_is_exact(self):
        rng = np.random.default_rng(0)
        x = rng.integers(-8, 8, size=(3, 4)).astype(np.float32) / 4
        rep = grad_check(F.sum, x, eps=2.0 ** -10)
        assert rep.max_rel_error == 0.0

    def test_reports_offending_index(self):
        def wrong(t):
            # forward is sum(x^2); the tape sees a detached copy of x[0, 1]
            sq = F.mul(t, t)
            mask = np.zeros(t.shape, bool)
            mask[0, 1] = True
            detached = Tensor(np.where(mask, sq.data, 0).astype(sq.dtype))
            return F.sum(F.add(F.masked_fill(sq, mask, 0.0), detached))
        rep = grad_check(wrong, np.ones((2, 3), np.float32))
        assert rep.index == (0, 1)
        assert not rep.ok(1e-3)

    def test_non_finite_rejected(self):
        with np.errstate(invalid="ignore"), pytest.raises(ValueError, match="finite"):
            grad_check(lambda t: F.sum(F.log(t)), np.array([-1.0, 2.0], np.float32))

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            grad_check(lambda t: F.mul(t, t), np.ones(3, np.float32))

    def test_relative_error_floor(self):
        rel = relative_error(np.array([1.0, 1e-9]), np.array([1.0, 0.0]), floor=1e-3)
        assert rel[1] == pytest.approx(1e-6)

    def test_three_layer_mlp(self):
        rng = np.random.default_rng(7)
        x = t32(rng.normal(size=(5, 6)))
        w1 = rng.normal(size=(6, 8)).astype(np.float32) / np.sqrt(6)
        w2 = t32(rng.normal(size=(8, 8)) / np.sqrt(8))
        w3 = t32(rng.normal(size=(8, 1)) / np.sqrt(8))
        y = rng.normal(size=(5, 1)).astype(np.float32)

        def loss(w):
            h = F.tanh(F.matmul(x, w))
            h = F.sigmoid(F.matmul(h, w2))
            d = F.sub(F.matmul(h, w3), y)
            return F.mean(F.mul(d, d))

        assert grad_check(loss, w1).max_rel_error < 1e-3


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    f, x = PRIMITIVES[name](np.random.default_rng([seed, 101]))
    rep = grad_check(f, x)
    assert rep.max_rel_error < 1e-3, f"{name}: {rep.max_rel_error:.2e} at {rep.index}"


def directional_check(f, x, v, eps=1e-3):
    leaf = Tensor(x.copy(), requires_grad=True)
    f(leaf).backward()
    analytic = float(np.sum(leaf.grad.astype(np.float64) * v))
    x64 = x.astype(np.float64)
    with no_grad():
        numeric = (float(f(Tensor(x64 + eps * v)).data) - float(f(Tensor(x64 - eps * v)).data)) / (2 * eps)
    scale = float(np.sum(np.abs(leaf.grad.astype(np.float64) * v)))
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3 * scale, 1e-12)


@settings(max_examples=100, deadline=None, derandomize=True)
@given(name=st.sampled_from(sorted(PRIMITIVES)), seed=st.integers(0, 2**31 - 1))
def test_jvp_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    f, x = PRIMITIVES[name](rng)
    assert x.size <= 64
    v = rng.normal(size=x.shape)
    assert directional_check(f, x, v) < 1e-3
