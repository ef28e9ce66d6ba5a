"""Reverse-mode engine: forward semantics against loop oracles, gradients against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfoa import autodiff as ad
from pfoa.errors import ShapeError, ValidationError

from gradcheck import distinct, grad_check
from oracles import bce, bilinear_loops, central_diff, conv2d_loops, maxpool2_loops, rel_err

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-3


class TestConv2d:
    def test_ones_no_pad(self):
        out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_ones_pad_one(self):
        out = ad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), pad=1)
        np.testing.assert_array_equal(out.data[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    @pytest.mark.parametrize(
        "stride,pad,k,hw", [(1, 1, 3, (7, 6)), (1, 0, 3, (7, 6)), (2, 1, 3, (9, 7)), (1, 0, 1, (7, 6)), (2, 0, 2, (8, 6))]
    )
    def test_matches_loop_oracle(self, stride, pad, k, hw):
        rng = np.random.default_rng(stride * 10 + pad + k)
        x = rng.standard_normal((2, 3, *hw))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(ad.conv2d(x, w, b, stride, pad).data, conv2d_loops(x, w, b, stride, pad), atol=1e-12)

    def test_gradient_random_2x3x8x8(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        assert grad_check(lambda x, w, b: ad.conv2d(x, w, b, 1, 1), [x, w, b]) < SMOOTH_TOL

    def test_gradient_strided(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.standard_normal((2, 2, 7, 7)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        assert grad_check(lambda x, w, b: ad.conv2d(x, w, b, 2, 1), [x, w, b]) < SMOOTH_TOL

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
            ad.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))

    def test_non_integral_output_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), np.zeros(1), stride=2)

    def test_does_not_mutate_inputs(self):
        rng = np.random.default_rng(2)
        x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))
        x0, w0 = x.copy(), w.copy()
        ad.conv2d(x, w, None, 1, 1)
        np.testing.assert_array_equal(x, x0)
        np.testing.assert_array_equal(w, w0)


class TestPointwiseAndPooling:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(np.zeros(1)).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        s = ad.sigmoid(np.array([-800.0, 800.0])).data
        assert np.all(np.isfinite(s))
        assert s[0] == pytest.approx(0.0) and s[1] == pytest.approx(1.0)

    def test_gap_mean(self):
        assert ad.gap(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)).data[0, 0] == 2.5

    def test_maxpool_matches_loops(self):
        x = np.random.default_rng(3).standard_normal((2, 3, 6, 4))
        np.testing.assert_array_equal(ad.maxpool2(x).data, maxpool2_loops(x))

    def test_maxpool_tie_routes_to_first_index(self):
        x = ad.Parameter(np.ones((1, 1, 2, 2)))
        ad.backward(ad.total(ad.maxpool2(x)), [x])
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_maxpool_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            ad.maxpool2(np.ones((1, 1, 3, 4)))

    def test_relu_gradient(self):
        x = distinct(np.random.default_rng(4), (2, 3, 4, 4))
        assert grad_check(ad.relu, [x]) < SMOOTH_TOL

    def test_maxpool_gradient(self):
        x = distinct(np.random.default_rng(5), (2, 2, 4, 6))
        assert grad_check(ad.maxpool2, [x]) < SMOOTH_TOL

    def test_sigmoid_gradient(self):
        x = np.random.default_rng(6).standard_normal((3, 5)) * 3
        assert grad_check(ad.sigmoid, [x]) < SMOOTH_TOL

    def test_gap_gradient(self):
        x = np.random.default_rng(7).standard_normal((2, 3, 4, 5))
        assert grad_check(ad.gap, [x]) < SMOOTH_TOL


class TestAffineAndShapes:
    def test_linear_values(self):
        x = np.array([[1.0, 2.0]])
        W = np.array([[1.0, 0.0], [0.5, -1.0], [2.0, 2.0]])
        b = np.array([0.0, 1.0, -1.0])
        np.testing.assert_allclose(ad.linear(x, W, b).data, [[1.0, -0.5, 5.0]])

    def test_linear_gradient(self):
        rng = np.random.default_rng(8)
        x, W, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
        assert grad_check(ad.linear, [x, W, b]) < SMOOTH_TOL

    def test_linear_shape_error(self):
        with pytest.raises(ShapeError):
            ad.linear(np.ones((2, 3)), np.ones((4, 2)), np.zeros(4))

    def test_concat_backward_splits_by_width(self):
        rng = np.random.default_rng(9)
        a, b, c = rng.standard_normal((3, 2)), rng.standard_normal((3, 4)), rng.standard_normal((3, 1))
        assert grad_check(ad.concat_features, [a, b, c]) < SMOOTH_TOL
        pa, pb = ad.Parameter(a), ad.Parameter(b)
        ad.backward(ad.total(ad.concat_features(pa, pb)), [pa, pb])
        assert pa.grad.shape == (3, 2) and pb.grad.shape == (3, 4)

    def test_concat_row_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat_features(np.ones((2, 2)), np.ones((3, 2)))

    def test_broadcast_constant_planes(self):
        out = ad.broadcast_spatial(np.array([[1.0, 2.0]]), 2, 2).data
        np.testing.assert_array_equal(out[0, 0], np.ones((2, 2)))
        np.testing.assert_array_equal(out[0, 1], np.full((2, 2), 2.0))

    def test_broadcast_gradient_sums(self):
        v = np.random.default_rng(10).standard_normal((2, 3))
        assert grad_check(lambda t: ad.broadcast_spatial(t, 3, 4), [v]) < SMOOTH_TOL

    def test_mul_channel_broadcast(self):
        rng = np.random.default_rng(11)
        A, F = rng.standard_normal((2, 1, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        np.testing.assert_allclose(ad.mul(A, F).data, A * F)
        assert grad_check(ad.mul, [A, F]) < SMOOTH_TOL

    def test_mul_rejects_other_broadcasts(self):
        with pytest.raises(ShapeError):
            ad.mul(np.ones((2, 3, 3, 3)), np.ones((2, 3, 1, 3)))

    def test_add_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            ad.add(np.ones((2, 3)), np.ones((3, 2)))
        rng = np.random.default_rng(12)
        assert grad_check(ad.add, [rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]) < SMOOTH_TOL

    @pytest.mark.parametrize("h,w,oh,ow", [(4, 4, 8, 8), (3, 5, 7, 4), (2, 2, 2, 2), (1, 3, 4, 6)])
    def test_upsample_matches_loops(self, h, w, oh, ow):
        x = np.random.default_rng(h * w).standard_normal((1, 1, h, w))
        np.testing.assert_allclose(ad.upsample_bilinear(x, oh, ow).data[0, 0], bilinear_loops(x[0, 0], oh, ow), atol=1e-12)

    def test_upsample_gradient(self):
        x = np.random.default_rng(13).standard_normal((2, 3, 3, 4))
        assert grad_check(lambda t: ad.upsample_bilinear(t, 7, 6), [x]) < SMOOTH_TOL


class TestFocalLoss:
    def test_scalar_hand_value(self):
        z = np.log(0.9 / 0.1)
        assert abs(float(ad.focal_loss(np.array([z]), np.array([1]), gamma=2.0).data) - 0.01 * -np.log(0.9)) < 1e-12
        assert abs(float(ad.focal_loss(np.array([z]), np.array([1]), gamma=2.0).data) - 1.0536e-3) < 1e-8

    def test_gamma_zero_is_bce(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            z = rng.standard_normal(16) * 4
            y = rng.integers(0, 2, 16)
            assert abs(float(ad.focal_loss(z, y, gamma=0.0, alpha=1.0).data) - bce(z, y).mean()) < 1e-12

    def test_confident_correct_vanishes(self):
        assert float(ad.focal_loss(np.array([40.0]), np.array([1])).data) < 1e-30

    def test_stable_for_large_logits(self):
        loss = ad.focal_loss(np.array([-500.0, 500.0]), np.array([1, 0]))
        assert np.isfinite(float(loss.data)) and float(loss.data) == pytest.approx(500.0)

    @pytest.mark.parametrize("gamma,alpha", [(0.0, 1.0), (2.0, 1.0), (1.5, 0.25), (5.0, 0.75)])
    def test_gradient(self, gamma, alpha):
        rng = np.random.default_rng(int(gamma * 10))
        z = rng.standard_normal(12) * 3
        y = rng.integers(0, 2, 12)
        p = ad.Parameter(z.copy())
        ad.backward(ad.focal_loss(p, y, gamma, alpha), [p])
        num = central_diff(lambda: float(ad.focal_loss(z, y, gamma, alpha).data), z)
        assert rel_err(p.grad, num) < SMOOTH_TOL

    def test_alpha_weights_classes(self):
        l1 = float(ad.focal_loss(np.array([0.0]), np.array([1]), gamma=0.0, alpha=0.25).data)
        l0 = float(ad.focal_loss(np.array([0.0]), np.array([0]), gamma=0.0, alpha=0.25).data)
        assert l1 == pytest.approx(0.25 * np.log(2)) and l0 == pytest.approx(0.75 * np.log(2))

    def test_bad_labels(self):
        with pytest.raises(ValidationError):
            ad.focal_loss(np.zeros(2), np.array([0, 2]))

    def test_bad_hyperparameters(self):
        with pytest.raises(ValidationError):
            ad.focal_loss(np.zeros(2), np.array([0, 1]), gamma=-1.0)
        with pytest.raises(ValidationError):
            ad.focal_loss(np.zeros(2), np.array([0, 1]), alpha=0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        z=st.floats(-30, 30, allow_nan=False),
        y=st.integers(0, 1),
        gamma=st.floats(0, 5),
    )
    def test_nonnegative_and_below_bce(self, z, y, gamma):
        f = float(ad.focal_loss(np.array([z]), np.array([y]), gamma=gamma).data)
        b = float(bce(np.array([z]), np.array([y]))[0]) if abs(z) < 30 else f
        assert f >= 0.0
        assert f <= b * (1 + 1e-9) + 1e-12


class TestInitAndOptimiser:
    def test_he_variance(self):
        draws = ad.he_init((100_000,), 200, seed=0)
        assert abs(draws.var() / 0.01 - 1) < 0.05
        assert abs(draws.mean()) < 3 * np.sqrt(0.01) / np.sqrt(draws.size)

    def test_he_deterministic(self):
        np.testing.assert_array_equal(ad.he_init((5, 5), 10, seed=3), ad.he_init((5, 5), 10, seed=3))

    def test_he_bad_fan_in(self):
        with pytest.raises(ValidationError):
            ad.he_init((2,), 0)

    def test_sgd_no_momentum(self):
        p = ad.Parameter(np.zeros(1))
        p.grad = np.ones(1)
        ad.sgd_momentum_step([p], lr=0.1, momentum=0.0)
        assert p.data[0] == pytest.approx(-0.1)

    def test_sgd_two_momentum_steps(self):
        p = ad.Parameter(np.zeros(1))
        for _ in range(2):
            p.grad = np.ones(1)
            ad.sgd_momentum_step([p], lr=1.0, momentum=0.9)
        assert p.data[0] == pytest.approx(-2.9)

    def test_sgd_zero_grad_decays_velocity(self):
        p = ad.Parameter(np.array([1.0]))
        p.momentum_buffer = np.array([2.0])
        p.grad = np.zeros(1)
        ad.sgd_momentum_step([p], lr=0.0, momentum=0.9)
        assert p.data[0] == 1.0 and p.momentum_buffer[0] == pytest.approx(1.8)

    def test_sgd_non_finite(self):
        p = ad.Parameter(np.zeros(1))
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError):
            ad.sgd_momentum_step([p], lr=0.1)

    def test_momentum_buffer_starts_at_zero(self):
        p = ad.Parameter(np.ones((2, 3)))
        np.testing.assert_array_equal(p.momentum_buffer, np.zeros((2, 3)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Parameter(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.total(x), [x])
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_rejected(self):
        x = ad.Parameter(np.ones(3))
        with pytest.raises(ShapeError):
            ad.backward(ad.relu(x), [x])

    def test_second_call_rejected(self):
        x = ad.Parameter(np.ones(3))
        loss = ad.total(x)
        ad.backward(loss, [x])
        with pytest.raises(RuntimeError):
            ad.backward(loss, [x])

    def test_disconnected_parameter_zero(self):
        a, b = ad.Parameter(np.ones(2)), ad.Parameter(np.ones(2))
        ad.backward(ad.total(a), [a, b])
        np.testing.assert_array_equal(b.grad, np.zeros(2))

    def test_gradients_do_not_accumulate_across_steps(self):
        x = ad.Parameter(np.ones(2))
        for _ in range(3):
            ad.backward(ad.total(ad.mul(x, x)), [x])
        np.testing.assert_array_equal(x.grad, 2 * np.ones(2))

    def test_shared_subexpression_accumulates(self):
        x = ad.Parameter(np.array([3.0]))
        y = ad.add(x, x)
        ad.backward(ad.total(ad.mul(y, x)), [x])  # 2x^2 -> 4x
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_grad_builds_no_tape(self):
        x = ad.Parameter(np.ones(2))
        with ad.no_grad():
            y = ad.total(ad.mul(x, x))
        assert not y.requires_grad
