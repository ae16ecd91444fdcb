"""Unit tests for the tensor/autodiff core."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesselcouple import autodiff as ad
from vesselcouple.autodiff import Tensor

finite_floats = st.floats(min_value=-10.0, max_value=10.0,
                          allow_nan=False, allow_infinity=False, width=64)


def small_arrays(shape=(4,)):
    return arrays(np.float64, shape, elements=finite_floats)


class TestElementwiseMin:
    def test_values(self):
        out = ad.elementwise_min(Tensor(np.array([0.3, 0.9])),
                                 Tensor(np.array([0.8, 0.8])))
        np.testing.assert_array_equal(out.data, [0.3, 0.8])

    def test_tie_splits_gradient_equally(self):
        a = Tensor(np.array([0.5]), requires_grad=True)
        b = Tensor(np.array([0.5]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.elementwise_min(a, b)))
        np.testing.assert_array_equal(a.grad, [0.5])
        np.testing.assert_array_equal(b.grad, [0.5])

    def test_gradient_routes_to_smaller_operand(self):
        a = Tensor(np.array([0.2]), requires_grad=True)
        b = Tensor(np.array([0.7]), requires_grad=True)
        ad.backward(ad.scalar_mul(ad.reduce_sum(ad.elementwise_min(a, b)), 2.0))
        np.testing.assert_array_equal(a.grad, [2.0])
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.elementwise_min(Tensor(np.ones(2)), Tensor(np.ones(3)))

    @given(small_arrays(), small_arrays())
    @settings(max_examples=50, deadline=None)
    def test_lower_bound_exact(self, a, b):
        out = ad.elementwise_min(Tensor(a), Tensor(b))
        assert np.all(out.data <= a)
        assert np.all(out.data <= b)


class TestElementwiseOps:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.sigmoid(x)))
        assert abs(x.grad[0] - 0.25) < 1e-12

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = ad.sigmoid(Tensor(np.array([-700.0, 700.0])))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] < 1e-100 and out.data[1] == 1.0

    def test_reduce_mean(self):
        assert ad.reduce_mean(Tensor(np.array([1.0, 2.0, 3.0]))).item() == 2.0

    def test_reduce_mean_axis(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(ad.reduce_mean(Tensor(x), axis=1).data,
                                   x.mean(axis=1))

    def test_reduce_sum_axis(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(ad.reduce_sum(Tensor(x), axis=0).data,
                                   x.sum(axis=0))

    def test_scalar_broadcast_sub(self):
        out = ad.sub(1.0, Tensor(np.array([0.25])))
        np.testing.assert_array_equal(out.data, [0.75])

    def test_clamp_interior_passthrough_gradient(self):
        x = Tensor(np.array([0.5, -3.0, 3.0]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.clamp(x, 0.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])

    @given(small_arrays(), small_arrays())
    @settings(max_examples=30, deadline=None)
    def test_add_mul_match_numpy(self, a, b):
        np.testing.assert_allclose(ad.add(Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_allclose(ad.mul(Tensor(a), Tensor(b)).data, a * b)


class TestSpatialOps:
    def test_conv2d_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_upsample2x_nearest(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = ad.upsample2x_nearest(x)
        np.testing.assert_array_equal(
            out.data[0, 0],
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_maxpool2x(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert ad.maxpool2x(x).data[0, 0, 0, 0] == 4.0

    def test_maxpool2x_backward_hits_argmax(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2),
                   requires_grad=True)
        ad.backward(ad.reduce_sum(ad.maxpool2x(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[0, 0], [0, 1]])

    def test_concat_channels(self):
        a = Tensor(np.ones((1, 2, 2, 2)))
        b = Tensor(np.zeros((1, 3, 2, 2)))
        out = ad.concat_channels(a, b)
        assert out.data.shape == (1, 5, 2, 2)
        np.testing.assert_array_equal(out.data[:, :2], 1.0)
        np.testing.assert_array_equal(out.data[:, 2:], 0.0)

    def test_conv2d_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        rep = ad.grad_check(
            lambda a, w: ad.reduce_mean(ad.conv2d(a, w, stride=1, padding=1)),
            [x, k])
        assert rep["max_rel_err"] < 1e-6


class TestBackward:
    def test_mean_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ad.backward(ad.reduce_mean(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, x))

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=5)

        def grad_of(fn):
            x = Tensor(data.copy(), requires_grad=True)
            ad.backward(fn(x))
            return x.grad

        f = lambda x: ad.reduce_mean(ad.mul(x, x))
        g = lambda x: ad.reduce_sum(ad.sigmoid(x))
        a, b = 2.5, -1.25
        combined = grad_of(lambda x: ad.add(ad.scalar_mul(f(x), a),
                                            ad.scalar_mul(g(x), b)))
        np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g),
                                   atol=1e-10)

    def test_bce_composite_gradient(self):
        rng = np.random.default_rng(1)
        z = Tensor(rng.normal(size=(3, 3)))
        l = rng.integers(0, 2, (3, 3)).astype(np.float64)

        def f(zz):
            y = ad.sigmoid(zz)
            lt = Tensor(l)
            term = ad.add(ad.mul(lt, ad.log(ad.clamp(y, 1e-7, 1 - 1e-7))),
                          ad.mul(ad.sub(1.0, lt),
                                 ad.log(ad.sub(1.0, ad.clamp(y, 1e-7, 1 - 1e-7)))))
            return ad.scalar_mul(ad.reduce_mean(term), -1.0)

        assert ad.grad_check(f, [z])["max_rel_err"] < 1e-6


class TestCheckingMode:
    def test_non_finite_construction_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.array([np.nan]))

    def test_checking_toggle(self):
        assert ad.checking()
        ad.set_checking(False)
        try:
            t = Tensor(np.array([np.inf]))
            assert not np.isfinite(t.data[0])
        finally:
            ad.set_checking(True)


class TestNormalizeGather:
    def test_normalize_cols_unit_norm(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 5)))
        out = ad.normalize_cols(x)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=0), 1.0,
                                   atol=1e-12)

    def test_gather_cols_selects_and_scatters(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = ad.gather_cols(x, [0, 2, 2])
        np.testing.assert_array_equal(out.data, [[0, 2, 2], [3, 5, 5]])
        ad.backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [[1, 0, 2], [1, 0, 2]])
