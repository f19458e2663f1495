"""Tensor-engine tests: op examples, finite-difference properties, round-trips."""
import math

import numpy as np
import pytest

from ssmlift import numerics as nm
from ssmlift.errors import DimensionError, EvaluationError
from ssmlift.numerics import Tensor, grad_check


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(eye, m)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_projector(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        m = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = nm.matmul(p, m)
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_gradient_fd_32bit(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), dtype=np.float32, requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), dtype=np.float32)
        # The map is linear in a, so a large step keeps FD cancellation small.
        err = grad_check(lambda t: nm.tensor_sum(nm.matmul(t, b)), a, h=0.1)
        assert err < 1e-4

    def test_backward_rules(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        out = nm.matmul(a, b)
        nm.backward(nm.tensor_sum(out))
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


class TestLayerNorm:
    def test_constant_vector_collapses_to_zero(self):
        x = Tensor(np.full((5,), 3.7))
        out = nm.layer_norm(x, eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros(5), atol=1e-12)

    def test_already_normalized_eps_zero(self):
        out = nm.layer_norm(Tensor([1.0, -1.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-12)

    def test_output_statistics(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(2.0, 3.0, size=(10, 32)))
        out = nm.layer_norm(x, eps=1e-5).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    def test_affine_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.layer_norm(Tensor(np.zeros((4, 8))), gamma=Tensor(np.ones(7)))


class TestElementwise:
    def test_silu_zero(self):
        assert nm.silu(Tensor([0.0])).item() == 0.0

    def test_softplus_zero_is_ln2(self):
        assert abs(nm.softplus(Tensor([0.0])).item() - math.log(2.0)) < 1e-12

    def test_softplus_overflow_safe(self):
        big = nm.softplus(Tensor([800.0])).item()
        assert big == 800.0
        small = nm.softplus(Tensor([-800.0])).item()
        assert small == 0.0

    def test_silu_gradient_at_one(self):
        x = Tensor([1.0], requires_grad=True)
        err = grad_check(lambda t: nm.tensor_sum(nm.silu(t)), x, h=1e-5)
        assert err < 1e-4

    def test_sigmoid_extremes_finite(self):
        out = nm.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)


class TestDepthwiseConv:
    def test_single_tap_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(6, 3)))
        k = Tensor(np.ones((1, 3)))
        out = nm.depthwise_conv1d(x, k, causal=True)
        np.testing.assert_array_equal(out.data, x.data)

    def test_causal_impulse_response(self):
        x = Tensor(np.array([[1.0], [0.0], [0.0], [0.0]]))
        k = Tensor(np.array([[2.5], [7.0]]))  # last tap applies at the current step
        out = nm.depthwise_conv1d(x, k, causal=True)
        np.testing.assert_allclose(out.data[:, 0], [7.0, 2.5, 0.0, 0.0], atol=1e-15)

    def test_kernel_longer_than_input(self):
        x = Tensor(np.ones((2, 1)))
        k = Tensor(np.ones((5, 1)))
        out = nm.depthwise_conv1d(x, k, causal=True)
        assert out.shape == (2, 1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nm.depthwise_conv1d(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 2))))

    def test_causality_invariance(self):
        rng = np.random.default_rng(4)
        x1 = rng.normal(size=(10, 3))
        x2 = x1.copy()
        x2[6:] = rng.normal(size=(4, 3))  # only the future changes
        k = Tensor(rng.normal(size=(4, 3)))
        out1 = nm.depthwise_conv1d(Tensor(x1), k, causal=True).data
        out2 = nm.depthwise_conv1d(Tensor(x2), k, causal=True).data
        np.testing.assert_array_equal(out1[:6], out2[:6])

    @pytest.mark.parametrize("causal", [True, False])
    def test_gradient_fd(self, causal):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(7, 2)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        err_x = grad_check(lambda t: nm.tensor_sum(nm.mul(
            nm.depthwise_conv1d(t, k, causal=causal),
            nm.depthwise_conv1d(t, k, causal=causal))), x, h=1e-5)
        err_k = grad_check(lambda t: nm.tensor_sum(nm.mul(
            nm.depthwise_conv1d(x, t, causal=causal),
            nm.depthwise_conv1d(x, t, causal=causal))), k, h=1e-5)
        assert err_x < 1e-4 and err_k < 1e-4


class TestGradCheck:
    def test_quadratic_is_exact(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        err = grad_check(lambda t: nm.tensor_sum(nm.mul(t, t)), x, h=1e-5)
        assert err < 1e-8

    def test_linear_gradient_all_ones(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        y = nm.tensor_sum(x)
        nm.backward(y)
        np.testing.assert_array_equal(x.grad, np.ones(4))
        err = grad_check(lambda t: nm.tensor_sum(t), x, h=1e-5)
        assert err < 1e-8

    def test_nonfinite_raises(self):
        x = Tensor([800.0], requires_grad=True)
        with pytest.raises(EvaluationError):
            grad_check(lambda t: nm.tensor_sum(nm.exp(t)), x, h=1e-5)


def _fd_cases():
    return [
        ("add_trailing", lambda t, c: nm.tensor_sum(nm.mul(
            nm.add(t, Tensor(c.data[:4])), nm.add(t, Tensor(c.data[:4]))))),
        ("sub", lambda t, c: nm.tensor_sum(nm.mul(nm.sub(t, 0.3), nm.sub(t, 0.3)))),
        ("mul", lambda t, c: nm.tensor_sum(nm.mul(nm.mul(t, c2d(c)), t))),
        ("div", lambda t, c: nm.tensor_sum(nm.div(t, nm.add(nm.mul(c2d(c), c2d(c)), 1.5)))),
        ("neg", lambda t, c: nm.tensor_sum(nm.mul(nm.neg(t), nm.neg(t)))),
        ("exp", lambda t, c: nm.tensor_mean(nm.exp(nm.mul(t, 0.3)))),
        ("sqrt", lambda t, c: nm.tensor_sum(nm.sqrt(nm.add(nm.mul(t, t), 0.7)))),
        ("sigmoid", lambda t, c: nm.tensor_sum(nm.sigmoid(t))),
        ("silu", lambda t, c: nm.tensor_sum(nm.silu(t))),
        ("softplus", lambda t, c: nm.tensor_sum(nm.softplus(t))),
        ("matmul", lambda t, c: nm.tensor_sum(nm.matmul(t, c2w(c)))),
        ("reshape_transpose", lambda t, c: nm.tensor_sum(
            nm.mul(nm.transpose(nm.reshape(t, (2, 6))), nm.transpose(nm.reshape(t, (2, 6)))))),
        ("slice_concat", lambda t, c: nm.tensor_sum(nm.mul(
            nm.concat([nm.slice_along(t, 1, 0, 2), nm.slice_along(t, 1, 2, 4)], axis=1), t))),
        ("sum_axis", lambda t, c: nm.tensor_sum(nm.mul(nm.tensor_sum(t, axis=1), nm.tensor_sum(t, axis=1)))),
        ("mean_axis", lambda t, c: nm.tensor_sum(nm.mul(nm.tensor_mean(t, axis=0), nm.tensor_mean(t, axis=0)))),
        ("broadcast_to", lambda t, c: nm.tensor_sum(nm.mul(
            nm.broadcast_to(nm.reshape(t, (3, 4, 1)), (3, 4, 5)), 0.5))),
        ("layer_norm_affine", lambda t, c: nm.tensor_sum(nm.mul(
            nm.layer_norm(t, gamma=Tensor(c.data[:4] * 0.5 + 1.0), beta=Tensor(c.data[4:8])), t))),
        ("permute_rows", lambda t, c: nm.tensor_sum(nm.mul(
            nm.permute_rows(t, _PERM, _INV), nm.permute_rows(t, _PERM, _INV)))),
    ]


_PERM = np.array([2, 0, 1], dtype=np.int64)
_INV = np.argsort(_PERM)


def c2d(c):
    return nm.reshape(nm.slice_along(c, 0, 0, 12), (3, 4))


def c2w(c):
    return nm.reshape(nm.slice_along(c, 0, 0, 8), (4, 2))


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name,builder", _fd_cases(), ids=[n for n, _ in _fd_cases()])
def test_op_gradients_match_finite_differences(name, builder, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    const = Tensor(rng.normal(size=(16,)))
    err = grad_check(lambda t: builder(t, const), x, h=1e-5)
    assert err < 1e-4, f"{name} (seed {seed}): rel err {err:.3e}"


class TestRoundTrips:
    def test_reshape_round_trip_bit_exact(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 6))
        back = nm.reshape(nm.reshape(Tensor(x), (3, 8)), (4, 6))
        np.testing.assert_array_equal(back.data, x)

    def test_transpose_round_trip_bit_exact(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 5))
        back = nm.transpose(nm.transpose(Tensor(x), (2, 0, 1)), (1, 2, 0))
        np.testing.assert_array_equal(back.data, x)

    def test_slice_concat_round_trip_bit_exact(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(7, 3))
        t = Tensor(x)
        back = nm.concat([nm.slice_along(t, 0, 0, 4), nm.slice_along(t, 0, 4, 7)], axis=0)
        np.testing.assert_array_equal(back.data, x)

    def test_permute_round_trip_bit_exact(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 2))
        perm = rng.permutation(5)
        inv = np.argsort(perm)
        back = nm.permute_rows(nm.permute_rows(Tensor(x), perm, inv), inv, perm)
        np.testing.assert_array_equal(back.data, x)


class TestBroadcastPolicy:
    def test_trailing_affine_allowed(self):
        x = Tensor(np.ones((2, 3, 4)))
        bias = Tensor(np.arange(4.0))
        out = nm.add(x, bias)
        np.testing.assert_allclose(out.data[0, 0], 1.0 + np.arange(4.0))

    def test_scalar_allowed(self):
        out = nm.mul(Tensor(np.ones((2, 2))), 3.0)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_non_trailing_rejected(self):
        with pytest.raises(DimensionError):
            nm.add(Tensor(np.ones((3, 1))), Tensor(np.ones((3, 4))))
        with pytest.raises(DimensionError):
            nm.mul(Tensor(np.ones(4)), Tensor(np.ones((4, 3))))

    def test_trailing_gradient_reduces(self):
        x = Tensor(np.ones((5, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        nm.backward(nm.tensor_sum(nm.add(x, b)))
        np.testing.assert_array_equal(b.grad, np.full(3, 5.0))


class TestTapeSemantics:
    def test_polynomial_gradient(self):
        x = Tensor([1.0, 2.0, -3.0], requires_grad=True)
        y = nm.tensor_sum(nm.add(nm.mul(x, x), x))
        nm.backward(y)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, rtol=1e-15)

    def test_grad_accumulates_across_backwards(self):
        x = Tensor([2.0], requires_grad=True)
        nm.backward(nm.tensor_sum(nm.mul(x, x)))
        first = x.grad.copy()
        nm.backward(nm.tensor_sum(nm.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with nm.no_grad():
            y = nm.mul(x, x)
        assert not y.requires_grad
        assert nm.tape_length() == 0

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = nm.mul(x, 2.0)
        with pytest.raises(DimensionError):
            nm.backward(y)
        nm.clear_tape()

    def test_mixed_precision_promotes(self):
        a = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float64))
        assert nm.add(a, b).dtype == np.float64

    def test_assert_finite(self):
        nm.assert_finite(Tensor([1.0, 2.0]))
        with pytest.raises(EvaluationError):
            nm.assert_finite(Tensor([np.inf]))
