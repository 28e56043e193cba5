"""Forward-kernel tests against brute-force references."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfprune.errors import ShapeError
from cfprune.tensor_ops import apply_layer, conv2d, flatten_one


def loop_conv2d(x, w, bias=None, stride=1, padding=0):
    """Nested-loop reference convolution (independent of the im2col path)."""
    b, c_in, h, wd = x.shape
    n_out, _, kh, kw = w.shape
    xp = np.zeros((b, c_in, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    h_out = (xp.shape[2] - kh) // stride + 1
    w_out = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((b, n_out, h_out, w_out), dtype=np.float64)
    for bi in range(b):
        for o in range(n_out):
            for oy in range(h_out):
                for ox in range(w_out):
                    acc = 0.0
                    for r in range(c_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[o, r, ky, kx] * xp[bi, r, oy * stride + ky, ox * stride + kx]
                    out[bi, o, oy, ox] = acc
            if bias is not None:
                out[bi, o] += bias[o]
    return out.astype(np.float32)


class TestConv2d:
    def test_scalar_scaling(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        w = np.full((1, 1, 1, 1), 2.0, dtype=np.float32)
        out = conv2d(x, w)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.0, dtype=np.float32))

    def test_zero_weights_annihilate(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        out = conv2d(x, np.zeros((4, 3, 3, 3), dtype=np.float32), padding=1)
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        got = conv2d(x, w, stride=1, padding=1)
        want = loop_conv2d(x, w, stride=1, padding=1)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_random_configs_vs_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            b = int(rng.integers(1, 3))
            c_in = int(rng.integers(1, 4))
            n_out = int(rng.integers(1, 4))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2))
            h = int(rng.integers(k, k + 4))
            x = rng.standard_normal((b, c_in, h, h)).astype(np.float32)
            w = rng.standard_normal((n_out, c_in, k, k)).astype(np.float32)
            bias = rng.standard_normal(n_out).astype(np.float32)
            got = conv2d(x, w, bias, stride=stride, padding=padding)
            want = loop_conv2d(x, w, bias, stride=stride, padding=padding)
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_linear_in_weights(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w1 = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        w2 = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        a, b = 0.7, -1.3
        lhs = conv2d(x, (a * w1 + b * w2).astype(np.float32), padding=1)
        rhs = a * conv2d(x, w1, padding=1) + b * conv2d(x, w2, padding=1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-4)

    def test_additive_over_input_channels(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        full = conv2d(x, w, padding=1)
        split = conv2d(x[:, :1], w[:, :1], padding=1) + conv2d(x[:, 1:], w[:, 1:], padding=1)
        np.testing.assert_allclose(full, split, atol=1e-5)

    def test_channel_mismatch_names_dims(self):
        with pytest.raises(ShapeError, match="2 channels.*expect 3"):
            conv2d(np.zeros((1, 2, 4, 4), dtype=np.float32),
                   np.zeros((1, 3, 3, 3), dtype=np.float32))

    def test_kernel_does_not_fit(self):
        with pytest.raises(ShapeError, match="does not fit"):
            conv2d(np.zeros((1, 1, 2, 2), dtype=np.float32),
                   np.zeros((1, 1, 3, 3), dtype=np.float32))


class TestApplyLayer:
    def test_relu(self):
        out = apply_layer("relu", [np.array([[[[-1.0, 0.0, 2.0]]]], dtype=np.float32)])
        np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 2.0])

    def test_add_identity(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(apply_layer("add", [x, np.zeros_like(x)]), x, atol=1e-7)

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_layer("add", [np.zeros((1, 2, 3, 3), dtype=np.float32),
                                np.zeros((1, 3, 3, 3), dtype=np.float32)])

    def test_batchnorm_whitens_its_own_stats(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((16, 3, 8, 8)).astype(np.float32) * 2.0 + 1.0
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        out = apply_layer("batchnorm", [x], {
            "mean": mean, "var": var,
            "scale": np.ones(3, dtype=np.float32), "shift": np.zeros(3, dtype=np.float32),
            "epsilon": 0.0,
        })
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-3)
        assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-3)

    def test_concat_stacks_channels_in_order(self):
        a = np.full((1, 2, 2, 2), 1.0, dtype=np.float32)
        b = np.full((1, 3, 2, 2), 2.0, dtype=np.float32)
        out = apply_layer("concat", [a, b])
        assert out.shape == (1, 5, 2, 2)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_maxpool_and_gap(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        pooled = apply_layer("maxpool", [x], {"kernel": 2, "stride": 2})
        np.testing.assert_array_equal(pooled.ravel(), [5, 7, 13, 15])
        gap = apply_layer("global_avgpool", [x])
        assert gap.shape == (1, 1, 1, 1)
        assert abs(float(gap[0, 0, 0, 0]) - x.mean()) < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ShapeError):
            apply_layer("softmax", [np.zeros((1, 1, 2, 2), dtype=np.float32)])


class TestFlattenOne:
    def test_row_major_order(self):
        np.testing.assert_array_equal(
            flatten_one(np.array([[1, 2], [3, 4]], dtype=np.float32)), [1, 2, 3, 4])

    def test_single_element(self):
        np.testing.assert_array_equal(flatten_one(np.array([7.0], dtype=np.float32)), [7.0])

    def test_index_arithmetic(self):
        t = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
        flat = flatten_one(t)
        assert flat.shape == (60,)
        rng = np.random.default_rng(7)
        for _ in range(20):
            i, j, k = rng.integers(0, 3), rng.integers(0, 4), rng.integers(0, 5)
            assert flat[i * 20 + j * 5 + k] == t[i, j, k]

    def test_empty_errors(self):
        with pytest.raises(ShapeError):
            flatten_one(np.zeros((0, 3), dtype=np.float32))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=4), min_size=1, max_size=4),
           st.integers(min_value=0, max_value=2**31 - 1))
    def test_flatten_reshape_identity(self, shape, seed):
        t = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        np.testing.assert_array_equal(flatten_one(t).reshape(shape), t)
