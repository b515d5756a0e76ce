import numpy as np
import numpy.testing as npt
import pytest

from ipgnet import ops
from ipgnet import tensor as T


def align_corners_oracle(values, n_out):
    """Independent align-corners linear interpolation, plain python."""
    values = list(values)
    n_in = len(values)
    out = []
    for i in range(n_out):
        src = 0.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        out.append(values[lo] * (1 - w) + values[hi] * w)
    return np.array(out)


class TestConv2d:
    def test_identity_kernel(self):
        x = T.Tensor(np.ones((1, 1, 4, 4)))
        w = T.Tensor(np.ones((1, 1, 1, 1)))
        out = ops.conv2d(x, w, stride=1, padding=0)
        npt.assert_array_equal(out.data, np.ones((1, 1, 4, 4)))

    def test_stem_shape_arithmetic(self):
        x = T.zeros((1, 1, 8, 8))
        w = T.zeros((1, 1, 7, 7))
        assert ops.conv2d(x, w, stride=2, padding=3).shape == (1, 1, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            ops.conv2d(T.zeros((1, 3, 4, 4)), T.zeros((2, 2, 3, 3)))

    def test_non_positive_output(self):
        with pytest.raises(T.ShapeError):
            ops.conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 5, 5)))

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        out = ops.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
        # brute-force reference
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for b in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        patch = xp[b, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        ref[b, o, i, j] = (patch * w[o]).sum()
        npt.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_dilation_matches_reference(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 8, 8))
        w = rng.normal(size=(2, 2, 3, 3))
        out = ops.conv2d(T.Tensor(x), T.Tensor(w), stride=1, padding=2, dilation=2).data
        xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
        ref = np.zeros_like(out)
        for o in range(2):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[0, :, i : i + 5 : 2, j : j + 5 : 2]
                    ref[0, o, i, j] = (patch * w[o]).sum()
        npt.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestMaxPool:
    def test_2x2_example(self):
        out = ops.maxpool2(T.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.item() == 4.0

    def test_odd_dims_rejected(self):
        with pytest.raises(T.ShapeError):
            ops.maxpool2(T.zeros((1, 1, 3, 4)))

    def test_tie_routes_to_first_row_major(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        T.backward(T.sum_all(ops.maxpool2(x)))
        npt.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_general_pool_matches_2x2_path(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 8, 6))
        a = ops.maxpool2(T.Tensor(x)).data
        b = ops.max_pool2d(T.Tensor(x), kernel=2, stride=2, padding=0).data
        npt.assert_array_equal(a, b)

    def test_3x3_s2_p1_halves_even_dims(self):
        out = ops.max_pool2d(T.zeros((1, 2, 32, 16)), kernel=3, stride=2, padding=1)
        assert out.shape == (1, 2, 16, 8)


class TestBatchNorm:
    def _params(self, c):
        gamma = T.Parameter("g", np.ones((1, c, 1, 1)))
        beta = T.Parameter("b", np.zeros((1, c, 1, 1)))
        return gamma, beta, np.zeros((1, c, 1, 1)), np.ones((1, c, 1, 1))

    def test_two_value_channel_closed_form(self):
        # values {1, 3}: mean 2, population std 1 -> {-1, +1} (up to eps)
        x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        g, b, rm, rv = self._params(1)
        out = ops.batch_norm(x, g, b, rm, rv, training=True)
        npt.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_constant_input_zeros(self):
        x = T.Tensor(np.full((2, 3, 4, 4), 7.0))
        g, b, rm, rv = self._params(3)
        out = ops.batch_norm(x, g, b, rm, rv, training=True)
        npt.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_running_stats_update(self):
        x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        g, b, rm, rv = self._params(1)
        ops.batch_norm(x, g, b, rm, rv, training=True, momentum=0.1)
        npt.assert_allclose(rm.ravel(), [0.2])        # 0.9*0 + 0.1*2
        npt.assert_allclose(rv.ravel(), [1.0])        # 0.9*1 + 0.1*1

    def test_eval_uses_running_stats(self):
        x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        g, b, _, _ = self._params(1)
        rm = np.full((1, 1, 1, 1), 2.0)
        rv = np.full((1, 1, 1, 1), 4.0)
        out = ops.batch_norm(x, g, b, rm, rv, training=False)
        npt.assert_allclose(out.data.ravel(), [-0.5, 0.5], atol=1e-5)

    def test_channel_mismatch(self):
        x = T.zeros((1, 2, 2, 2))
        g, b, rm, rv = self._params(3)
        with pytest.raises(T.ShapeError):
            ops.batch_norm(x, g, b, rm, rv, training=True)


class TestLayerNorm:
    def _params(self, c):
        return (T.Parameter("s", np.ones((1, c, 1, 1))),
                T.Parameter("h", np.zeros((1, c, 1, 1))))

    def test_two_channel_closed_form(self):
        x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
        s, h = self._params(2)
        out = ops.layer_norm(x, s, h)
        npt.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_single_channel_zeros(self):
        x = T.Tensor(np.full((2, 1, 3, 3), 5.0))
        s, h = self._params(1)
        npt.assert_allclose(ops.layer_norm(x, s, h).data, 0.0, atol=1e-12)

    def test_normalization_invariant(self):
        # input variance >> eps: per-position channel mean ~0, variance ~1
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.normal(scale=10.0, size=(2, 16, 5, 5)))
        s, h = self._params(16)
        out = ops.layer_norm(x, s, h).data
        mean = out.mean(axis=1)
        var = out.var(axis=1)
        assert np.abs(mean).max() < 1e-10
        assert np.abs(var - 1.0).max() < 1e-6


class TestResize:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(size=(1, 3, 5, 7)))
        out = ops.resize_bilinear(x, 5, 7)
        npt.assert_array_equal(out.data, x.data)

    def test_row_upsample_example(self):
        x = T.Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
        out = ops.resize_bilinear(x, 1, 3)
        npt.assert_array_equal(out.data.ravel(), [0.0, 1.0, 2.0])

    def test_matches_align_corners_oracle(self):
        rng = np.random.default_rng(9)
        row = rng.normal(size=6)
        x = T.Tensor(row.reshape(1, 1, 1, 6))
        for n_out in (1, 2, 4, 6, 9, 13):
            out = ops.resize_bilinear(x, 1, n_out).data.ravel()
            npt.assert_allclose(out, align_corners_oracle(row, n_out), atol=1e-12)

    def test_constant_preserved(self):
        x = T.Tensor(np.full((1, 2, 8, 8), 3.25))
        out = ops.resize_bilinear(x, 3, 5)
        npt.assert_array_equal(out.data, np.full((1, 2, 3, 5), 3.25))


class TestChannelInterp:
    def test_example_two_to_three(self):
        x = T.Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
        out = ops.channel_interp(x, 3)
        npt.assert_array_equal(out.data.ravel(), [1.0, 2.0, 3.0])

    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(rng.normal(size=(2, 4, 3, 3)))
        npt.assert_array_equal(ops.channel_interp(x, 4).data, x.data)

    def test_matches_oracle_all_widths(self):
        rng = np.random.default_rng(10)
        chans = rng.normal(size=5)
        x = T.Tensor(chans.reshape(1, 5, 1, 1))
        for n_out in range(1, 12):
            out = ops.channel_interp(x, n_out).data.ravel()
            npt.assert_allclose(out, align_corners_oracle(chans, n_out), atol=1e-12)


class TestPointwise:
    def test_sigmoid_values(self):
        x = T.Tensor(np.array([0.0, 100.0, -100.0]).reshape(1, 1, 1, 3))
        out = ops.sigmoid(x).data.ravel()
        npt.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-12)

    def test_log_sigmoid_stable_at_extremes(self):
        x = T.Tensor(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2))
        out = ops.log_sigmoid(x).data.ravel()
        assert np.isfinite(out).all()
        npt.assert_allclose(out, [-800.0, 0.0], atol=1e-9)

    def test_smooth_l1_branches(self):
        x = T.Tensor(np.array([0.5, -0.5, 2.0, -3.0]).reshape(1, 1, 1, 4))
        out = ops.smooth_l1(x).data.ravel()
        npt.assert_allclose(out, [0.125, 0.125, 1.5, 2.5], atol=1e-12)
