"""Tensor core: shape algebra, reductions, losses, and backward rules."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfckit import tensor as tt
from tfckit.tensor import ShapeError, Tensor


def rand(shape, rng, scale=1.0, dtype=np.float32):
    return (rng.uniform(-1, 1, size=shape) * scale).astype(dtype)


class TestPermute:
    def test_singleton_identity(self):
        v = Tensor(np.array([[[[[3.5]]]]], dtype=np.float32))
        out = tt.permute_to_temporal(v)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == np.float32(3.5)

    def test_shape_contract(self):
        v = Tensor(np.zeros((2, 3, 4, 5, 6), dtype=np.float32))
        assert tt.permute_to_temporal(v).shape == (60, 3, 4)

    def test_element_placement(self):
        rng = np.random.default_rng(0)
        b, c, t, h, w = 2, 3, 4, 2, 3
        v = Tensor(rand((b, c, t, h, w), rng))
        out = tt.permute_to_temporal(v).data
        for bi in range(b):
            for ci in range(c):
                for ti in range(t):
                    for hi in range(h):
                        for wi in range(w):
                            assert out[(bi * h + hi) * w + wi, ci, ti] == \
                                v.data[bi, ci, ti, hi, wi]

    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4),
           st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_round_trip_bitwise(self, b, c, t, h, w, seed):
        rng = np.random.default_rng(seed)
        v = Tensor(rand((b, c, t, h, w), rng))
        back = tt.permute_from_temporal(tt.permute_to_temporal(v), b, h, w)
        assert back.data.tobytes() == v.data.tobytes()

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            tt.permute_to_temporal(Tensor(np.zeros((2, 3, 4), dtype=np.float32)))


class TestReductions:
    def test_mean_over_channels_single_channel(self):
        rng = np.random.default_rng(1)
        v = Tensor(rand((4, 1, 5), rng))
        out = tt.mean_over_channels(v)
        np.testing.assert_array_equal(out.data, v.data[:, 0, :])

    def test_mean_over_channels_identical(self):
        v = Tensor(np.full((2, 7, 3), 0.25, dtype=np.float32))
        np.testing.assert_array_equal(tt.mean_over_channels(v).data,
                                      np.full((2, 3), 0.25, dtype=np.float32))

    def test_mean_over_channels_hand_sum(self):
        # channels hold constants 0, 1, 2; mean is (0+1+2)/3 = 1 everywhere
        data = np.zeros((2, 3, 4), dtype=np.float32)
        for c in range(3):
            data[:, c, :] = c
        out = tt.mean_over_channels(Tensor(data))
        np.testing.assert_array_equal(out.data, np.ones((2, 4), dtype=np.float32))

    def test_global_avg_pool_constant(self):
        v = Tensor(np.full((2, 3, 4, 5, 6), -1.75, dtype=np.float32))
        np.testing.assert_array_equal(tt.global_avg_pool_3d(v).data,
                                      np.full((2, 3), -1.75, dtype=np.float32))

    def test_reduction_bits_reproducible(self):
        rng = np.random.default_rng(2)
        data = rand((3, 5, 7, 2, 2), rng)
        a = tt.global_avg_pool_3d(Tensor(data)).data.tobytes()
        b = tt.global_avg_pool_3d(Tensor(data.copy())).data.tobytes()
        assert a == b


class TestElementwise:
    def test_relu_values(self):
        v = Tensor(np.array([-1.0, 2.0, 0.0], dtype=np.float32))
        np.testing.assert_array_equal(tt.relu(v).data,
                                      np.array([0.0, 2.0, 0.0], dtype=np.float32))

    def test_shape_mismatch(self):
        a = Tensor(np.zeros((2, 3), dtype=np.float32))
        b = Tensor(np.zeros((3, 2), dtype=np.float32))
        with pytest.raises(ShapeError):
            tt.add(a, b)

    def test_matmul_against_numpy(self):
        rng = np.random.default_rng(3)
        a, b = rand((4, 5), rng), rand((5, 6), rng)
        out = tt.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-6)


class TestCrossEntropy:
    def test_uniform_logits_closed_form(self):
        for k in (2, 10, 16):
            logits = Tensor(np.zeros((3, k), dtype=np.float32))
            loss = tt.softmax_cross_entropy(logits, np.zeros(3, dtype=np.int64))
            assert loss.shape == ()
            assert abs(float(loss.data) - math.log(k)) < 1e-6

    def test_perfect_prediction_small_loss(self):
        logits = np.full((2, 4), -20.0, dtype=np.float32)
        logits[0, 1] = 20.0
        logits[1, 3] = 20.0
        loss = tt.softmax_cross_entropy(Tensor(logits), np.array([1, 3]))
        assert float(loss.data) < 1e-5

    def test_gradient_is_probs_minus_onehot(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rand((3, 5), rng), requires_grad=True)
        labels = np.array([0, 2, 4])
        loss = tt.softmax_cross_entropy(logits, labels)
        loss.backward()
        z = logits.data.astype(np.float64)
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        p[np.arange(3), labels] -= 1
        np.testing.assert_allclose(logits.grad, p / 3, atol=1e-7)


def central_difference(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Gradient of scalar f by central differences, one coordinate at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-4)
    return float(np.max(np.abs(a - b) / denom))


def rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative difference: worst deviation over the arrays' scale."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(a - b))) / scale


class TestBackward:
    def test_sum_gives_ones(self):
        rng = np.random.default_rng(5)
        x = Tensor(rand((3, 4), rng), requires_grad=True)
        tt.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_half_square_gives_identity(self):
        rng = np.random.default_rng(6)
        x = Tensor(rand((2, 3, 4), rng), requires_grad=True)
        loss = tt.scale(tt.sum_all(tt.mul(x, x)), 0.5)
        loss.backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            tt.relu(x).backward()

    def test_shared_subexpression_counted_once(self):
        # y = x + x differentiates to 2, not 1 or 4, only if each recorded
        # node's rule fires exactly once in the replay.
        x = Tensor(np.array(3.0, dtype=np.float32).reshape(()), requires_grad=True)
        y = tt.add(x, x)
        z = tt.mul(y, y)  # z = 4 x^2, dz/dx = 8x = 24
        z.backward()
        assert float(x.grad) == pytest.approx(24.0, rel=1e-6)

    @pytest.mark.parametrize("op,shape", [
        ("permute", (2, 3, 4, 2, 2)),
        ("mean_channels", (3, 4, 5)),
        ("pool3d", (2, 3, 4, 2, 2)),
        ("pool_spatial", (2, 3, 4, 2, 2)),
        ("relu", (3, 4)),
        ("matmul", (4, 5)),
    ])
    def test_finite_difference(self, op, shape):
        rng = np.random.default_rng(hash(op) % 2**32)
        x64 = rand(shape, rng, scale=0.1, dtype=np.float64) + 0.05

        def run(x_arr, want_grad):
            x = Tensor(x_arr, requires_grad=want_grad, dtype=np.float64)
            if op == "permute":
                y = tt.permute_to_temporal(x)
            elif op == "mean_channels":
                y = tt.mean_over_channels(x)
            elif op == "pool3d":
                y = tt.global_avg_pool_3d(x)
            elif op == "pool_spatial":
                y = tt.spatial_avg_pool(x)
            elif op == "relu":
                y = tt.relu(x)
            else:
                other = Tensor(rand((shape[1], 3), np.random.default_rng(0),
                                    dtype=np.float64))
                y = tt.matmul(x, other)
            loss = tt.sum_all(tt.mul(y, y))
            return x, loss

        x, loss = run(x64, True)
        loss.backward()
        fd = central_difference(lambda: float(run(x64, False)[1].data), x64)
        assert max_rel_err(x.grad, fd) < 1e-3
