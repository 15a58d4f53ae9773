import numpy as np
import pytest
from conftest import bilinear_reference, conv_reference, make_block

from app.errors import ConfigError, NumericalError
from app.tensor import (
    CbrBlock,
    FeatureMap,
    OffsetField,
    batch_norm_inference,
    cbr,
    cbr_array,
    cbr_backward,
    concat_channels,
    conv2d,
    conv2d_array,
    conv2d_grad_input,
    grid_sample_array,
    grid_sample_bilinear,
    grid_sample_grad_offsets,
    grid_sample_grad_offsets_array,
    mse_loss,
    mse_loss_array,
    relu,
    seeded_cbr_block,
    softmax_channels,
    split_channels,
)


class TestFeatureMap:
    def test_rejects_wrong_rank(self):
        with pytest.raises(ConfigError):
            FeatureMap(np.zeros((2, 3, 4)))

    def test_rejects_empty_dim(self):
        with pytest.raises(ConfigError):
            FeatureMap(np.zeros((1, 0, 4, 4)))

    def test_rejects_non_finite(self):
        data = np.zeros((1, 1, 2, 2))
        data[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericalError):
            FeatureMap(data)

    def test_is_float32_and_read_only(self):
        src = np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4)
        fm = FeatureMap(src)
        assert fm.data.dtype == np.float32
        assert fm.shape == (1, 2, 3, 4)
        with pytest.raises(ValueError):
            fm.data[0, 0, 0, 0] = 1.0
        # element (b, c, y, x) sits at ((b*C + c)*H + y)*W + x
        assert fm.flat()[((0 * 2 + 1) * 3 + 2) * 4 + 3] == src[0, 1, 2, 3]

    def test_does_not_alias_caller_array(self):
        src = np.ones((1, 1, 2, 2), dtype=np.float32)
        fm = FeatureMap(src)
        src[0, 0, 0, 0] = 5.0
        assert fm.data[0, 0, 0, 0] == 1.0

    def test_offset_field_needs_two_channels(self):
        with pytest.raises(ConfigError):
            OffsetField(np.zeros((1, 3, 4, 4)))


class TestConv:
    def test_zero_input_isolates_bias(self, rng):
        block = CbrBlock(weight=rng.normal(size=(1, 1, 3, 3)), bias=[0.5], padding=1)
        out = conv2d(FeatureMap.zeros(1, 1, 3, 3), block)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 0.5, dtype=np.float32))

    def test_unit_kernel_scales(self, rng):
        x = rng.normal(size=(1, 1, 4, 5))
        block = CbrBlock(weight=np.full((1, 1, 1, 1), 2.0), bias=[0.0])
        np.testing.assert_allclose(conv2d(FeatureMap(x), block).data, 2.0 * x.astype(np.float32), rtol=1e-6)

    @pytest.mark.parametrize("stride, padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_nested_loops(self, rng, stride, padding):
        x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
        block = make_block(rng, 3, 2, stride=stride, padding=padding, bn=False)
        expected = conv_reference(x.astype(np.float64), block.weight, block.bias, stride, padding)
        np.testing.assert_allclose(conv2d(FeatureMap(x), block).data, expected, atol=1e-5)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_input_gradient_is_the_adjoint(self, rng, stride):
        x = rng.normal(size=(2, 3, 9, 9))
        block = make_block(rng, 4, 3, stride=stride, bn=False)
        linear = conv2d_array(x, block) - block.bias[None, :, None, None]
        g = rng.normal(size=linear.shape)
        np.testing.assert_allclose(np.sum(linear * g), np.sum(x * conv2d_grad_input(g, block, x.shape)), rtol=1e-9)
        with pytest.raises(ConfigError):
            conv2d_grad_input(g[:, :2], block, x.shape)

    def test_channel_mismatch(self, rng):
        block = make_block(rng, 3, 2)
        with pytest.raises(ConfigError):
            conv2d(FeatureMap.zeros(1, 4, 5, 5), block)

    def test_empty_output(self, rng):
        block = make_block(rng, 1, 1, k=3, padding=0)
        with pytest.raises(ConfigError):
            conv2d(FeatureMap.zeros(1, 1, 2, 2), block)


class TestCbr:
    def test_identity_norm_is_relu_of_conv(self, rng):
        x = FeatureMap(rng.normal(size=(1, 2, 5, 5)))
        block = CbrBlock(weight=rng.normal(size=(3, 2, 3, 3)), bias=rng.normal(size=3), padding=1, eps=1e-12)
        np.testing.assert_allclose(cbr(x, block).data, relu(conv2d(x, block)).data, atol=1e-6)

    def test_negative_preactivation_is_zeroed(self):
        block = CbrBlock(weight=np.ones((2, 1, 3, 3)), bias=[-100.0, -100.0], padding=1)
        out = cbr(FeatureMap(np.ones((1, 1, 4, 4))), block)
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_composed_reference(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
        block = make_block(rng, 3, 4)
        pre = conv_reference(x.astype(np.float64), block.weight, block.bias, 1, 1)
        normed = (pre - block.running_mean[None, :, None, None]) / np.sqrt(
            block.running_var[None, :, None, None] + block.eps
        ) * block.gamma[None, :, None, None] + block.beta[None, :, None, None]
        np.testing.assert_allclose(cbr(FeatureMap(x), block).data, np.maximum(normed, 0.0), atol=1e-5)

    def test_batch_norm_inference(self, rng):
        block = make_block(rng, 2, 2)
        x = rng.normal(size=(1, 2, 3, 3))
        expected = (x - block.running_mean[None, :, None, None]) / np.sqrt(
            block.running_var[None, :, None, None] + block.eps
        ) * block.gamma[None, :, None, None] + block.beta[None, :, None, None]
        np.testing.assert_allclose(batch_norm_inference(FeatureMap(x), block).data, expected, atol=1e-5)

    @pytest.mark.parametrize("var", [0.0, -1.0])
    def test_rejects_non_positive_variance(self, var):
        with pytest.raises(ConfigError):
            CbrBlock(weight=np.ones((1, 1, 1, 1)), bias=[0.0], running_var=[var])

    def test_backward_matches_finite_differences(self, rng):
        block = make_block(rng, 3, 2, stride=2)
        x = rng.normal(size=(1, 2, 6, 6))
        upstream = rng.normal(size=cbr_array(x, block).shape)
        analytic = cbr_backward(x, block, upstream)
        fd = np.zeros_like(x)
        step = 1e-6
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            fd[idx] = (np.sum(upstream * cbr_array(xp, block)) - np.sum(upstream * cbr_array(xm, block))) / (2 * step)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-6)

    def test_seeded_block_is_deterministic(self):
        a = seeded_cbr_block(4, 8, stride=2, seed=3)
        b = seeded_cbr_block(4, 8, stride=2, seed=3)
        np.testing.assert_array_equal(a.weight, b.weight)
        assert a.padding == 1
        assert a.output_size(16, 16) == (8, 8)


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax_channels(FeatureMap.zeros(1, 118, 2, 3))
        np.testing.assert_allclose(out.data, 1.0 / 118, rtol=1e-6)

    def test_closed_form_pair(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 1] = np.log(3.0)
        np.testing.assert_allclose(softmax_channels(FeatureMap(logits)).data[0, :, 0, 0], [0.25, 0.75], atol=1e-7)

    def test_sums_to_one_and_shift_invariant(self, rng):
        logits = rng.normal(scale=3.0, size=(2, 118, 4, 5))
        out = softmax_channels(FeatureMap(logits)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        shifted = softmax_channels(FeatureMap(logits + 7.5)).data
        np.testing.assert_allclose(shifted, out, atol=1e-6)


class TestGridSample:
    def test_zero_offsets_are_identity(self, rng):
        x = FeatureMap(rng.normal(size=(2, 3, 5, 7)))
        out = grid_sample_bilinear(x, OffsetField(np.zeros((2, 2, 5, 7))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_ramp_shift(self):
        h, w = 4, 6
        ramp = np.broadcast_to(np.arange(w, dtype=np.float64), (1, 1, h, w))
        offsets = np.zeros((1, 2, h, w))
        offsets[:, 0] = 1.0
        out = grid_sample_bilinear(FeatureMap(ramp), OffsetField(offsets)).data
        np.testing.assert_allclose(out[0, 0, :, : w - 1], ramp[0, 0, :, : w - 1] + 1.0)

    def test_outside_samples_are_zero(self, rng):
        x = FeatureMap(rng.normal(size=(1, 1, 4, 4)))
        offsets = np.full((1, 2, 4, 4), 10.0)
        out = grid_sample_bilinear(x, OffsetField(offsets))
        assert np.all(out.data == 0.0)

    def test_matches_pointwise_reference(self, rng):
        img = rng.normal(size=(1, 1, 6, 6))
        offsets = rng.uniform(-2.5, 2.5, size=(1, 2, 6, 6))
        out = grid_sample_array(img, offsets)
        for y in range(6):
            for x in range(6):
                expected = bilinear_reference(img[0, 0], x + offsets[0, 0, y, x], y + offsets[0, 1, y, x])
                assert out[0, 0, y, x] == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            grid_sample_bilinear(FeatureMap.zeros(1, 1, 4, 4), OffsetField(np.zeros((1, 2, 4, 5))))


class TestGridSampleGrad:
    def test_flat_field_has_zero_gradient(self, rng):
        x = FeatureMap(np.full((1, 2, 6, 6), 3.0))
        offsets = OffsetField(rng.uniform(-0.4, 0.4, size=(1, 2, 6, 6)))
        upstream = FeatureMap(rng.normal(size=(1, 2, 6, 6)))
        # interior samples never touch the zero padding
        grad = grid_sample_grad_offsets(x, offsets, upstream).data[:, :, 1:-1, 1:-1]
        np.testing.assert_allclose(grad, 0.0, atol=1e-6)

    def test_ramp_gradient_uses_lower_cell(self):
        w = 6
        ramp = np.broadcast_to(np.arange(w, dtype=np.float64), (1, 1, 5, w))
        grad = grid_sample_grad_offsets(
            FeatureMap(ramp), OffsetField(np.zeros((1, 2, 5, w))), FeatureMap(np.ones((1, 1, 5, w)))
        ).data
        np.testing.assert_allclose(grad[0, 0, :, 1:], 1.0)
        np.testing.assert_allclose(grad[0, 1, 1:, :], 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 1, 6, 6))
        # keep sample points away from cell borders so the step never crosses a kink
        offsets = rng.integers(-2, 2, size=(1, 2, 6, 6)) + rng.uniform(0.2, 0.8, size=(1, 2, 6, 6))
        upstream = rng.normal(size=(1, 1, 6, 6))
        analytic = grid_sample_grad_offsets_array(x, offsets, upstream)
        fd = np.zeros_like(offsets)
        step = 1e-3
        for idx in np.ndindex(offsets.shape):
            op, om = offsets.copy(), offsets.copy()
            op[idx] += step
            om[idx] -= step
            fd[idx] = (np.sum(upstream * grid_sample_array(x, op)) - np.sum(upstream * grid_sample_array(x, om))) / (
                2 * step
            )
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-9)


class TestMseLoss:
    def test_equal_inputs(self, rng):
        a = FeatureMap(rng.normal(size=(2, 3, 4, 4)))
        loss, grad = mse_loss(a, a)
        assert loss == 0.0
        assert np.all(grad.data == 0.0)

    def test_constant_offset_sums_channels(self, rng):
        b = rng.normal(size=(2, 5, 4, 3))
        loss, _ = mse_loss(FeatureMap(b + 0.5), FeatureMap(b))
        assert loss == pytest.approx(5 * 0.25, rel=1e-5)
        loss_el, _ = mse_loss(FeatureMap(b + 0.5), FeatureMap(b), normalization="elements")
        assert loss_el == pytest.approx(0.25, rel=1e-5)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(1, 2, 6, 6)).astype(np.float32).astype(np.float64)
        b = rng.normal(size=(1, 2, 6, 6)).astype(np.float32).astype(np.float64)
        _, grad = mse_loss_array(a, b)
        fd = np.zeros_like(a)
        step = 1e-3
        for idx in np.ndindex(a.shape):
            ap, am = a.copy(), a.copy()
            ap[idx] += step
            am[idx] -= step
            fd[idx] = (mse_loss_array(ap, b)[0] - mse_loss_array(am, b)[0]) / (2 * step)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            mse_loss(FeatureMap.zeros(1, 1, 2, 2), FeatureMap.zeros(1, 2, 2, 2))


def test_concat_and_split_round_trip(rng):
    a = FeatureMap(rng.normal(size=(1, 2, 3, 3)))
    b = FeatureMap(rng.normal(size=(1, 3, 3, 3)))
    joined = concat_channels(a, b)
    assert joined.channels == 5
    left, right = split_channels(joined, 2)
    np.testing.assert_array_equal(left.data, a.data)
    np.testing.assert_array_equal(right.data, b.data)
    with pytest.raises(ConfigError):
        concat_channels(a, FeatureMap.zeros(1, 1, 4, 3))
