import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcheck
from fusionvote import nn_core as nn
from fusionvote.errors import ConfigurationError
from oracles import direct_conv


class TestConvForward:
    def test_identity_kernel(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = nn.conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_diagonal_kernel(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = nn.conv2d_forward(x, w, np.zeros(1))
        np.testing.assert_array_equal(out, [[[5.0]]])

    def test_zero_kernels(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 5))
        out = nn.conv2d_forward(x, np.zeros((4, 3, 3, 3)), np.zeros(4), padding=1)
        assert out.shape == (4, 5, 5)
        assert not out.any()

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_matches_direct_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 7, 6))
        w = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        np.testing.assert_allclose(nn.conv2d_forward(x, w, b, stride, pad),
                                   direct_conv(x, w, b, stride, pad), atol=1e-12)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 2, 6, 6))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        batched = nn.conv2d_forward(x, w, b, 1, 1)
        for i in range(4):
            np.testing.assert_allclose(batched[i], nn.conv2d_forward(x[i], w, b, 1, 1), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_bad_stride(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d_forward(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), stride=0)

    def test_linear_in_kernels(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 8, 8))
        A, B = rng.normal(size=(2, 4, 3, 3, 3))
        b = np.zeros(4)
        lhs = nn.conv2d_forward(x, (A + B) / 2, b, 1, 1)
        rhs = (nn.conv2d_forward(x, A, b, 1, 1) + nn.conv2d_forward(x, B, b, 1, 1)) / 2
        assert np.max(np.abs(lhs - rhs)) < 1e-6

    def test_float32_preserved(self):
        x = np.ones((1, 4, 4), dtype=np.float32)
        out = nn.conv2d_forward(x, np.ones((1, 1, 3, 3), dtype=np.float32), np.zeros(1, dtype=np.float32))
        assert out.dtype == np.float32


class TestConvBackward:
    def test_scalar_chain_rule(self):
        x, w = np.array([[[3.0]]]), np.array([[[[2.0]]]])
        g = nn.conv2d_backward(x, w, np.array([[[5.0]]]))
        assert g.params["weight"].item() == 15.0
        assert g.input.item() == 10.0
        assert g.params["bias"].item() == 5.0

    def test_zero_upstream(self):
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
        g = nn.conv2d_backward(x, w, np.zeros((3, 3, 3)))
        assert not g.params["weight"].any() and not g.params["bias"].any() and not g.input.any()

    def test_finite_difference_reference_case(self):
        rng = np.random.default_rng(52)
        for _ in range(20):
            x = rng.normal(size=(1, 4, 4))
            w = rng.normal(size=(2, 1, 3, 3))
            b = np.zeros(2)
            R = rng.normal(size=(2, 2, 2))
            f = lambda: float((nn.conv2d_forward(x, w, b) * R).sum())
            g = nn.conv2d_backward(x, w, R)
            assert gradcheck.rel_error(g.params["weight"], gradcheck.numeric_grad(f, w)) < 1e-6
            assert gradcheck.rel_error(g.input, gradcheck.numeric_grad(f, x)) < 1e-6

    def test_grad_shapes_match_params(self):
        x, w = np.zeros((2, 3, 6, 6)), np.zeros((4, 3, 3, 3))
        g = nn.conv2d_backward(x, w, np.zeros((2, 4, 3, 3)), stride=2, padding=1)
        assert g.params["weight"].shape == w.shape
        assert g.params["bias"].shape == (4,)
        assert g.input.shape == x.shape

    def test_skip_input_grad(self):
        g = nn.conv2d_backward(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 2, 2)),
                               need_input_grad=False)
        assert g.input is None

    def test_upstream_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn.conv2d_backward(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros((1, 3, 3)))


@pytest.mark.parametrize("name", list(gradcheck.gradient_cases()))
def test_layer_gradients_match_finite_differences(name):
    run = gradcheck.gradient_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    errors = [run(rng) for _ in range(20)]
    assert max(errors) < gradcheck.TOL


class TestDense:
    def test_forward_values(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 0.0]])
        np.testing.assert_allclose(nn.dense_forward(x, w, np.array([0.0, 1.0, 2.0])), [[1.0, -0.5, 2.0]])

    def test_unbatched(self):
        out = nn.dense_forward(np.ones(3), np.ones((2, 3)), np.zeros(2))
        assert out.shape == (2,)

    def test_feature_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn.dense_forward(np.ones((1, 4)), np.ones((2, 3)), np.zeros(2))

    def test_backward_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            nn.dense_backward(np.ones((1, 3)), np.ones((2, 3)), np.ones((1, 3)))


class TestActivationsAndPooling:
    def test_relu_sign_cases(self):
        np.testing.assert_array_equal(nn.relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_relu_backward_masks(self):
        g = nn.relu_backward(np.array([-1.0, 0.0, 2.0]), np.array([5.0, 5.0, 5.0]))
        np.testing.assert_array_equal(g.input, [0.0, 0.0, 5.0])

    def test_maxpool_single_window(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(nn.maxpool2x2_forward(x), [[[4.0]]])
        g = nn.maxpool2x2_backward(x, np.array([[[7.0]]]))
        np.testing.assert_array_equal(g.input, [[[0.0, 0.0], [0.0, 7.0]]])

    def test_maxpool_tie_routes_once(self):
        x = np.ones((1, 2, 2))
        g = nn.maxpool2x2_backward(x, np.array([[[1.0]]]))
        assert g.input.sum() == 1.0
        assert g.input[0, 0, 0] == 1.0

    def test_maxpool_drops_odd_edge(self):
        out = nn.maxpool2x2_forward(np.arange(25.0).reshape(1, 5, 5))
        np.testing.assert_array_equal(out, [[[6.0, 8.0], [16.0, 18.0]]])

    def test_maxpool_too_small(self):
        with pytest.raises(ConfigurationError):
            nn.maxpool2x2_forward(np.zeros((1, 1, 3)))

    def test_flatten_roundtrip(self):
        x = np.arange(24.0).reshape(2, 3, 2, 2)
        flat = nn.flatten(x)
        assert flat.shape == (2, 12)
        np.testing.assert_array_equal(nn.flatten_backward(x, flat).input, x)

    def test_global_avg_pool(self):
        x = np.arange(8.0).reshape(1, 2, 2, 2)
        np.testing.assert_array_equal(nn.global_avg_pool(x), [[1.5, 5.5]])


class TestSoftmax:
    @pytest.mark.parametrize("C", [1, 2, 5, 9])
    def test_constant_logits_uniform(self, C):
        np.testing.assert_allclose(nn.softmax(np.full(C, 3.3)), np.full(C, 1.0 / C))

    def test_closed_form(self):
        np.testing.assert_allclose(nn.softmax(np.array([0.0, np.log(2.0)])), [1 / 3, 2 / 3], atol=1e-15)

    def test_extreme_logits_finite(self):
        q = nn.softmax(np.array([1000.0, -1000.0, 0.0]))
        assert np.all(np.isfinite(q))
        np.testing.assert_allclose(q, [1.0, 0.0, 0.0])

    def test_log_softmax_consistent(self):
        z = np.random.default_rng(0).normal(size=(4, 6))
        np.testing.assert_allclose(np.exp(nn.log_softmax(z)), nn.softmax(z), atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_shift_invariance_and_normalization(self, z, k):
        q = nn.softmax(z)
        assert abs(q.sum() - 1.0) < 1e-6
        assert np.max(np.abs(nn.softmax(z + k) - q)) < 1e-9
        assert np.argmax(nn.softmax(z + k)) == np.argmax(q)


class TestPrecision:
    def test_float64_mode_scoped(self):
        before = nn.default_dtype()
        with nn.float64_mode():
            assert nn.default_dtype() == np.float64
            assert nn.as_tensor([1, 2]).dtype == np.float64
        assert nn.default_dtype() == before

    def test_rejects_other_dtypes(self):
        with pytest.raises(ConfigurationError):
            nn.set_default_dtype(np.int32)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2**16))
def test_conv_output_shape_and_finiteness(n, m, k, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5 + k, 6))
    out = nn.conv2d_forward(x, rng.normal(size=(m, n, k, k)), rng.normal(size=m), 1, pad)
    assert out.shape == (m, 5 + k + 2 * pad - k + 1, 6 + 2 * pad - k + 1)
    assert np.all(np.isfinite(out))
