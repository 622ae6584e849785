import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stabnet import tensor as tc
from stabnet.errors import DimensionError, NumericError, ParameterError
from stabnet.tensor import Tensor


def conv_bruteforce(x, k, stride, pad):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, F, oh, ow))
    for b in range(B):
        for f in range(F):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * k[f])
    return out


finite = st.floats(-2, 2, allow_nan=False, width=32)


class TestTensorBasics:
    def test_float32_storage(self):
        t = Tensor([1, 2, 3])
        assert t.data.dtype == np.float32
        assert t.shape == (3,)

    def test_too_many_dims(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_backward_seed_is_one(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tc.sum(x)
        y.backward()
        assert y.grad == pytest.approx(1.0)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_grad_shape_matches_value(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        tc.sum(tc.relu(x)).backward()
        assert x.grad.shape == x.shape

    def test_backward_needs_scalar(self):
        with pytest.raises(DimensionError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_grads_accumulate_through_shared_input(self):
        x = Tensor([3.0], requires_grad=True)
        tc.sum(tc.add(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0])


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(tc.matmul(Tensor(eye), Tensor(eye)).data, eye)

    def test_hand_example(self):
        out = tc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_zeros(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(tc.matmul(Tensor(a), Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad(self):
        gen = np.random.default_rng(1)
        b = gen.uniform(-2, 2, (4, 3))
        a = gen.uniform(-2, 2, (2, 4))
        assert tc.grad_check(lambda t: tc.sum(tc.matmul(t, Tensor(b))), a) < 1e-6
        assert tc.grad_check(lambda t: tc.sq_l2_norm(tc.matmul(Tensor(a), t)), b) < 1e-6


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 4))
        out = tc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_allclose(out.data, x.astype(np.float32))

    def test_one_by_one_sums_channels(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
        out = tc.conv2d(Tensor(x), Tensor(np.ones((1, 3, 1, 1))))
        np.testing.assert_allclose(out.data[:, 0], x.sum(axis=1), rtol=1e-5, atol=1e-6)

    def test_all_ones_three_by_three(self):
        out = tc.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_zero_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 2, 5, 5))
        out = tc.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), pad=1)
        assert not out.data.any()

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            tc.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), pad=1)

    def test_output_size(self):
        assert tc.conv_output_size(28, 5, 1, 2) == 28
        assert tc.conv_output_size(7, 3, 2, 0) == 3

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (3, 0)])
    def test_matches_bruteforce(self, stride, pad):
        gen = np.random.default_rng(stride * 10 + pad)
        x = gen.uniform(-2, 2, (2, 3, 7, 6))
        k = gen.uniform(-2, 2, (4, 3, 3, 2))
        with tc.precision(np.float64):
            out = tc.conv2d(Tensor(x), Tensor(k), stride, pad)
        np.testing.assert_allclose(out.data, conv_bruteforce(x, k, stride, pad), rtol=1e-10, atol=1e-10)

    def test_grads(self):
        gen = np.random.default_rng(7)
        x = gen.uniform(-2, 2, (2, 2, 5, 5))
        k = gen.uniform(-2, 2, (3, 2, 3, 3))
        r = gen.uniform(-1, 1, (2, 3, 3, 3))

        def via_x(t):
            return tc.sum(tc.mul(tc.conv2d(t, Tensor(k), 2, 1), Tensor(r)))

        def via_k(t):
            return tc.sum(tc.mul(tc.conv2d(Tensor(x), t, 2, 1), Tensor(r)))

        assert tc.grad_check(via_x, x) < 1e-6
        assert tc.grad_check(via_k, k) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_logits_no_overflow(self):
        out = tc.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-30)

    def test_closed_form(self):
        out = tc.softmax(Tensor([math.log(1), math.log(2), math.log(3)])).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(DimensionError):
            tc.softmax(Tensor([[1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(2, 10)), elements=st.floats(-30, 30, width=32)))
    def test_rows_are_distributions(self, logits):
        p = tc.softmax(Tensor(logits)).data
        np.testing.assert_allclose(p.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)
        assert np.all(p >= 0) and np.all(p <= 1)

    def test_rows_strictly_inside_unit_interval_for_moderate_logits(self):
        p = tc.softmax(Tensor(np.random.default_rng(0).uniform(-5, 5, (4, 10)))).data
        assert np.all(p > 0) and np.all(p < 1)


class TestElementwise:
    def test_sq_l2_norm(self):
        assert tc.sq_l2_norm(Tensor([3.0, 4.0])).item() == 25.0

    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_mean_of_constant(self):
        assert tc.mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5

    def test_add_sub_mul_scale(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal(tc.add(a, b).data, [4, 7])
        np.testing.assert_array_equal(tc.sub(a, b).data, [-2, -3])
        np.testing.assert_array_equal(tc.mul(a, b).data, [3, 10])
        np.testing.assert_array_equal(tc.scale(a, -2).data, [-2, -4])

    @pytest.mark.parametrize("op", [tc.add, tc.sub, tc.mul])
    def test_shape_mismatch(self, op):
        with pytest.raises(DimensionError):
            op(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_reductions_accumulate_in_64_bit(self):
        x = np.full(10**6, 0.1, dtype=np.float32)
        expected = np.sum(x, dtype=np.float64)
        assert tc.sum(Tensor(x)).item() == pytest.approx(expected, rel=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.integers(1, 200), elements=finite), st.randoms(use_true_random=False))
    def test_sum_mean_permutation_invariant(self, x, rnd):
        perm = list(range(x.size))
        rnd.shuffle(perm)
        for op in (tc.sum, tc.mean):
            a, b = op(Tensor(x)).item(), op(Tensor(x[perm])).item()
            assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


class TestGradCheck:
    def test_sum_exact(self):
        x = np.random.default_rng(0).uniform(-2, 2, 10)
        assert tc.grad_check(tc.sum, x) <= 1e-6

    def test_sq_l2_norm(self):
        x = np.random.default_rng(1).uniform(-2, 2, (3, 4))
        assert tc.grad_check(tc.sq_l2_norm, x, 1e-3) <= 1e-3

    @pytest.mark.parametrize("op", [tc.relu, tc.softmax, lambda t: tc.scale(t, 3.0), tc.mean])
    def test_unary_ops(self, op):
        gen = np.random.default_rng(2)
        x = gen.uniform(0.05, 2, (3, 4)) * gen.choice([-1, 1], (3, 4))
        r = gen.uniform(-1, 1, (3, 4))

        def f(t):
            y = op(t)
            return y if y.data.size == 1 else tc.sum(tc.mul(y, Tensor(r)))

        assert tc.grad_check(f, x) <= 1e-3

    def test_two_deep_composition(self):
        gen = np.random.default_rng(3)
        x = gen.uniform(-2, 2, (2, 5))
        w = gen.uniform(-1, 1, (5, 4))
        b = gen.uniform(-1, 1, 4)

        def f(t):
            h = tc.relu(tc.add_bias(tc.matmul(t, Tensor(w)), Tensor(b)))
            return tc.sq_l2_norm(tc.softmax(h))

        assert tc.grad_check(f, x) <= 1e-3

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            tc.grad_check(lambda t: tc.scale(tc.sum(t), float("inf")), np.ones(2))

    def test_eps_must_be_positive(self):
        with pytest.raises(ParameterError):
            tc.grad_check(tc.sum, np.ones(2), eps=0)

    def test_precision_context_restores(self):
        with tc.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32
