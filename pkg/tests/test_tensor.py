import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camkit import tensor as T
from camkit.errors import ConsistencyError, DimensionError
from oracles import central_difference, naive_conv, naive_maxpool, relative_error


def spec2d(cin, cout, k, stride=1, pad=0):
    return T.ConvSpec(2, cin, cout, k, stride, pad)


class TestConvForward:
    def test_scaling_kernel(self):
        out = T.conv_forward(np.ones((1, 3, 3)), [[[[2.0]]]], [0.0], spec2d(1, 1, 1))
        assert out.shape == (1, 3, 3)
        assert np.all(out == 2.0)

    def test_mean_kernel(self):
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3)
        w = np.full((1, 1, 3, 3), 1 / 9)
        out = T.conv_forward(x, w, [0.0], spec2d(1, 1, 3))
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(5.0, abs=1e-6)

    def test_strided_padded_matches_loops(self, rng):
        x = rng.normal(size=(2, 5, 5)).astype(np.float32)
        w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        out = T.conv_forward(x, w, b, spec2d(2, 3, 3, stride=2, pad=1))
        np.testing.assert_allclose(out, naive_conv(x, w, b, (2, 2), (1, 1)), atol=1e-6)

    def test_output_dtype_follows_input(self):
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        out32 = T.conv_forward(np.ones((1, 3, 3), dtype=np.float32), w, [0.0], spec2d(1, 1, 1))
        out64 = T.conv_forward(np.ones((1, 3, 3)), w, [0.0], spec2d(1, 1, 1))
        assert out32.dtype == np.float32
        assert out64.dtype == np.float64

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError, match="axis 0"):
            T.conv_forward(np.ones((2, 3, 3)), np.ones((1, 1, 1, 1)), [0.0], spec2d(1, 1, 1))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError, match="axis 1"):
            T.conv_forward(np.ones((1, 2, 5)), np.ones((1, 1, 3, 3)), [0.0], spec2d(1, 1, 3))

    def test_spec_list_length_checked(self):
        with pytest.raises(DimensionError):
            T.ConvSpec(3, 1, 1, [3, 3], 1, 0)


class TestConvBackward:
    def test_scaling_kernel(self):
        g = T.conv_backward_input(np.ones((1, 3, 3)), [[[[2.0]]]], spec2d(1, 1, 1), (1, 3, 3))
        assert np.all(g == 2.0)

    def test_zero_seed(self, rng):
        w = rng.normal(size=(2, 1, 3, 3))
        g = T.conv_backward_input(np.zeros((2, 4, 4)), w, spec2d(1, 2, 3, pad=1), (1, 4, 4))
        assert g.shape == (1, 4, 4)
        assert not g.any()

    @pytest.mark.parametrize("dims,stride,pad", [(2, 1, 1), (2, 2, 1), (2, 2, 0), (3, 1, 1), (3, 2, 0)])
    def test_finite_differences(self, rng, dims, stride, pad):
        spec = T.ConvSpec(dims, 2, 3, 3, stride, pad)
        shape = (2,) + (5,) * dims
        x = rng.normal(size=shape)
        w = rng.normal(size=spec.weight_shape)
        gout = rng.normal(size=spec.output_shape(shape))
        f = lambda v: float((gout * T.conv_forward(v, w, None, spec)).sum())
        analytic = T.conv_backward_input(gout, w, spec, shape)
        assert relative_error(analytic, central_difference(f, x)) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv_backward_input(np.ones((1, 2, 2)), np.ones((1, 1, 1, 1)), spec2d(1, 1, 1), (1, 3, 3))


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(T.relu_forward([-1.0, 0.0, 2.5]), [0.0, 0.0, 2.5])

    def test_all_negative_and_positive(self, rng):
        neg = -np.abs(rng.normal(size=(2, 3))) - 0.1
        pos = np.abs(rng.normal(size=(2, 3))).astype(np.float32) + 0.1
        assert not T.relu_forward(neg).any()
        np.testing.assert_array_equal(T.relu_forward(pos), pos)

    def test_guided_blocks_negative_grad_and_input(self):
        np.testing.assert_array_equal(T.relu_backward([5.0, -3.0], [-1.0, 2.0], "guided"), [0, 0])

    def test_guided_all_open(self):
        np.testing.assert_array_equal(T.relu_backward([5.0, 7.0], [2.0, 3.0], "guided"), [5, 7])

    def test_standard_gate(self):
        np.testing.assert_array_equal(T.relu_backward([5.0, -3.0], [-1.0, 2.0], "standard"), [0, -3])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.relu_backward(np.ones(3), np.ones(2))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=30))
    def test_guided_nonzero_needs_both_gates(self, pairs):
        grad = np.array([p[0] for p in pairs], dtype=np.float32)
        saved = np.array([p[1] for p in pairs], dtype=np.float32)
        out = T.relu_backward(grad, saved, "guided")
        nz = out != 0
        assert np.all(saved[nz] > 0) and np.all(grad[nz] > 0)


class TestMaxPool:
    def test_simple(self):
        out, idx = T.maxpool_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2, 2)
        assert out.item() == 4.0
        assert idx.item() == 3

    def test_constant_takes_first(self):
        out, idx = T.maxpool_forward(np.full((1, 4, 4), 7.0), 2, 2, 2)
        assert np.all(out == 7.0)
        np.testing.assert_array_equal(idx[0], [[0, 2], [8, 10]])

    def test_matches_loops(self, rng):
        x = rng.normal(size=(2, 6, 6)).astype(np.float32)
        out, idx = T.maxpool_forward(x, 2, 2, 2)
        ref, ref_idx = naive_maxpool(x, (2, 2), (2, 2))
        np.testing.assert_allclose(out, ref, atol=1e-6)
        np.testing.assert_array_equal(idx, ref_idx)

    def test_backward_routes_to_winner(self):
        g = T.maxpool_backward(np.array([[[1.0]]]), np.array([[[3]]]), (1, 2, 2))
        np.testing.assert_array_equal(g, [[[0, 0], [0, 1]]])

    def test_backward_zero(self):
        _, idx = T.maxpool_forward(np.arange(16.0).reshape(1, 4, 4), 2, 2, 2)
        assert not T.maxpool_backward(np.zeros((1, 2, 2)), idx, (1, 4, 4)).any()

    def test_backward_accumulates_overlap(self):
        x = np.array([[[0.0, 5.0, 0.0]]])
        _, idx = T.maxpool_forward(x, [1, 2], [1, 1], 2)
        g = T.maxpool_backward(np.ones((1, 1, 2)), idx, x.shape)
        np.testing.assert_array_equal(g, [[[0, 2, 0]]])

    def test_backward_bad_index(self):
        with pytest.raises(ConsistencyError):
            T.maxpool_backward(np.ones((1, 1, 1)), np.array([[[9]]]), (1, 2, 2))

    @pytest.mark.parametrize("dims", [2, 3])
    def test_finite_differences(self, rng, dims):
        # a permutation of well-separated values keeps every window tie-free
        shape = (2,) + (4,) * dims
        x = rng.permutation(np.prod(shape)).reshape(shape).astype(np.float64) * 0.1
        gout = rng.normal(size=(2,) + (2,) * dims)
        _, idx = T.maxpool_forward(x, 2, 2, dims)
        f = lambda v: float((gout * T.maxpool_forward(v, 2, 2, dims)[0]).sum())
        analytic = T.maxpool_backward(gout, idx, shape)
        assert relative_error(analytic, central_difference(f, x)) < 1e-3

    def test_window_too_big(self):
        with pytest.raises(DimensionError):
            T.maxpool_forward(np.ones((1, 1, 3)), 2, 2, 2)


class TestGap:
    def test_forward(self):
        np.testing.assert_allclose(T.gap_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]])), [2.5])

    def test_backward(self):
        np.testing.assert_array_equal(T.gap_backward(np.array([4.0]), (1, 2, 2)), np.ones((1, 2, 2)))

    def test_finite_differences(self, rng):
        x = rng.normal(size=(3, 4, 5))
        gout = rng.normal(size=3)
        f = lambda v: float((gout * T.gap_forward(v)).sum())
        assert relative_error(T.gap_backward(gout, x.shape), central_difference(f, x)) < 1e-3

    def test_needs_spatial_axes(self):
        with pytest.raises(DimensionError):
            T.gap_forward(np.ones(3))


class TestLinear:
    def test_identity(self, rng):
        x = rng.normal(size=4).astype(np.float32)
        np.testing.assert_array_equal(T.linear_forward(x, np.eye(4), np.zeros(4)), x)

    def test_hand_algebra(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.linear_forward([1.0, 1.0], w, [0.0, 0.0]), [3, 7])
        np.testing.assert_array_equal(T.linear_backward_input([1.0, 0.0], w), [1, 2])

    def test_finite_differences(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(4, 6))
        b = rng.normal(size=4)
        gout = rng.normal(size=4)
        f = lambda v: float((gout * T.linear_forward(v, w, b)).sum())
        analytic = T.linear_backward_input(gout, w, x.shape)
        assert relative_error(analytic, central_difference(f, x)) < 1e-3

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            T.linear_forward(np.ones(3), np.ones((2, 2)), None)


class TestInterpolate:
    @pytest.mark.parametrize("mode", ["nearest", "linear"])
    def test_constant(self, mode):
        out = T.interpolate(np.full((1, 2, 2), 3.5), (4, 4), mode)
        assert out.shape == (1, 4, 4)
        assert np.all(out == 3.5)

    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 5)).astype(np.float32)
        np.testing.assert_array_equal(T.interpolate(x, (3, 5), "linear"), x)

    def test_midpoint(self):
        np.testing.assert_allclose(T.interpolate(np.array([[0.0, 1.0]]), (3,)), [[0.0, 0.5, 1.0]])

    def test_target_one_takes_first(self):
        assert T.interpolate(np.array([[4.0, 9.0, 1.0]]), (1,)).tolist() == [[4.0]]

    def test_aligned_corners_exact(self, rng):
        x = rng.normal(size=(1, 3, 4, 5))
        out = T.interpolate(x, (5, 7, 9), "linear")
        for corner in np.ndindex(2, 2, 2):
            src = tuple(c * (n - 1) for c, n in zip(corner, x.shape[1:]))
            dst = tuple(c * (n - 1) for c, n in zip(corner, out.shape[1:]))
            assert out[(0, *dst)] == x[(0, *src)]

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            T.interpolate(np.ones((1, 2, 2)), (4,))

    @pytest.mark.parametrize("mode", ["nearest", "linear"])
    def test_backward_is_adjoint(self, rng, mode):
        x = rng.normal(size=(2, 3, 4))
        y = rng.normal(size=(2, 5, 7))
        lhs = (T.interpolate(x, (5, 7), mode) * y).sum()
        rhs = (x * T.interpolate_backward(y, x.shape, mode)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("fn,args", [
    (T.relu_forward, ()),
    (T.gap_forward, ()),
    (lambda x: T.conv_forward(x, np.full((2, 3, 3, 3), 0.3), None, spec2d(3, 2, 3, pad=1)), ()),
    (lambda x: T.maxpool_forward(x, 2, 2, 2)[0], ()),
    (lambda x: T.interpolate(x, (7, 9)), ()),
])
def test_deterministic(rng, fn, args):
    x = rng.normal(size=(3, 6, 6)).astype(np.float32)
    assert fn(x).tobytes() == fn(x.copy()).tobytes()
