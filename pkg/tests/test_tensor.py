import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabnlab.tensor import (
    ShapeError,
    affine,
    conv2d,
    global_avg_pool,
    gradcheck,
    numerical_grad,
    relative_error,
    relu,
    softmax_cross_entropy,
)


def direct_conv(x, w, stride, pad):
    """Quadruple-loop cross-correlation used as the summation oracle."""
    B, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for b in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(conv2d(x, w).output, x)

    def test_zero_kernel(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
        out = conv2d(x, np.zeros((4, 3, 3, 3)), pad=1)
        assert not out.output.any()
        dx, dw, db = out.backward(np.ones_like(out.output))
        assert not dx.any()
        assert db is None

    def test_all_ones(self):
        y = conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3))).output
        assert y.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(y, 9.0)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_direct_summation(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(conv2d(x, w, stride=stride, pad=pad).output,
                                   direct_conv(x, w, stride, pad), atol=1e-12)

    def test_bias_added_per_channel(self):
        x = np.zeros((1, 2, 3, 3))
        y = conv2d(x, np.ones((2, 2, 1, 1)), b=np.array([1.0, -2.0])).output
        np.testing.assert_array_equal(y[0, 0], 1.0)
        np.testing.assert_array_equal(y[0, 1], -2.0)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradcheck(self, stride, pad):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(x, w, b, stride=stride, pad=pad)
        r = rng.normal(size=out.output.shape)
        dx, dw, db = out.backward(r)
        assert gradcheck(lambda z: (r * conv2d(z, w, b, stride, pad).output).sum(), x, dx) < 1e-6
        assert gradcheck(lambda z: (r * conv2d(x, z, b, stride, pad).output).sum(), w, dw) < 1e-6
        assert gradcheck(lambda z: (r * conv2d(x, w, z, stride, pad).output).sum(), b, db) < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))

    def test_nonfinite_input(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            conv2d(x, np.ones((1, 1, 1, 1)))

    def test_backward_once_and_shape(self):
        out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 1, 1)))
        with pytest.raises(ShapeError):
            out.backward(np.ones((1, 1, 2, 2)))
        out.backward(np.ones((1, 1, 3, 3)))
        with pytest.raises(RuntimeError):
            out.backward(np.ones((1, 1, 3, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, seed, a, c):
        rng = np.random.default_rng(seed)
        x1, x2 = rng.normal(size=(2, 1, 2, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3))
        lhs = conv2d(a * x1 + c * x2, w, pad=1).output
        rhs = a * conv2d(x1, w, pad=1).output + c * conv2d(x2, w, pad=1).output
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestAffine:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(affine(x, np.eye(4), np.zeros(4)).output, x)

    def test_bias_grad_is_column_sum(self):
        rng = np.random.default_rng(1)
        dy = rng.normal(size=(5, 2))
        _, _, db = affine(rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), np.zeros(2)).backward(dy)
        np.testing.assert_allclose(db, dy.sum(axis=0))

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
        r = rng.normal(size=(4, 2))
        dx, dw, db = affine(x, w, b).backward(r)
        assert gradcheck(lambda z: (r * affine(z, w, b).output).sum(), x, dx) < 1e-6
        assert gradcheck(lambda z: (r * affine(x, z, b).output).sum(), w, dw) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affine(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))


class TestRelu:
    def test_sign_cases(self):
        np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])).output, [0, 0, 2])

    def test_nonnegative_identity(self):
        x = np.abs(np.random.default_rng(0).normal(size=10))
        np.testing.assert_array_equal(relu(x).output, x)

    def test_gradcheck_away_from_kink(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 5))
        x[np.abs(x) < 1e-3] = 0.5
        r = rng.normal(size=x.shape)
        dx = relu(x).backward(r)
        assert gradcheck(lambda z: (r * relu(z).output).sum(), x, dx) < 1e-6

    def test_keeps_dtype(self):
        assert relu(np.ones(3, dtype=np.float32)).output.dtype == np.float32


class TestPoolAndLoss:
    def test_pool_gradcheck(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 4, 4))
        r = rng.normal(size=(2, 3))
        dx = global_avg_pool(x).backward(r)
        assert gradcheck(lambda z: (r * global_avg_pool(z).output).sum(), x, dx) < 1e-6

    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 7)), np.array([0, 3, 6]))
        assert loss == pytest.approx(np.log(7))

    def test_confident_correct(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e3
        loss, _ = softmax_cross_entropy(logits, np.array([2]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 4, 2, 2])
        _, grad = softmax_cross_entropy(logits, labels)
        assert gradcheck(lambda z: softmax_cross_entropy(z, labels)[0], logits, grad) < 1e-6

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestGradcheck:
    def test_quadratic(self):
        x = np.random.default_rng(0).normal(size=6)
        assert gradcheck(lambda z: 0.5 * (z * z).sum(), x, x) < 1e-9

    def test_numerical_grad_float64(self):
        x = np.array([1.0, -2.0])
        g = numerical_grad(lambda z: (z ** 3).sum(), x, dtype=np.float64)
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-8)

    def test_detects_wrong_gradient(self):
        x = np.array([1.0, 2.0])
        assert gradcheck(lambda z: (z * z).sum(), x, x) > 0.4

    def test_nonfinite_is_failure(self):
        assert gradcheck(lambda z: z.sum(), np.ones(2), np.array([np.nan, 1.0])) == float("inf")
        with np.errstate(all="ignore"):
            assert gradcheck(lambda z: np.log(z).sum(), np.array([0.0]), np.array([1.0])) == float("inf")

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([1e-12]))[0] == pytest.approx(1e-4)
