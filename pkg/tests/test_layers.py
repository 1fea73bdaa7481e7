import numpy as np
import numpy.testing as npt
import pytest

from kaf_oneshot.errors import ShapeError, StateError
from kaf_oneshot.layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU
from kaf_oneshot.tensor import finite_difference_grad, rel_error


def conv_oracle(x, w, b, stride):
    """Direct quadruple-loop cross-correlation; the independent reference."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, ci, i * stride + u, j * stride + v] * w[fi, ci, u, v]
                    out[bi, fi, i, j] = acc
    return out


def pool_oracle(x, window):
    n, c, h, wd = x.shape
    out = np.zeros((n, c, h // window, wd // window))
    for bi in range(n):
        for ci in range(c):
            for i in range(h // window):
                for j in range(wd // window):
                    out[bi, ci, i, j] = x[bi, ci, i * window : (i + 1) * window,
                                          j * window : (j + 1) * window].max()
    return out


def linear_oracle(x, w, b):
    n, i = x.shape
    o = w.shape[1]
    out = np.zeros((n, o))
    for bi in range(n):
        for oi in range(o):
            acc = b[oi]
            for ii in range(i):
                acc += x[bi, ii] * w[ii, oi]
            out[bi, oi] = acc
    return out


class TestConv2d:
    def test_all_ones_3x3_sums_to_nine(self):
        layer = Conv2d(1, 1, 3)
        layer.params["weights"][:] = 1.0
        layer.params["bias"][:] = 0.0
        out = layer.forward(np.ones((1, 1, 3, 3)))
        npt.assert_allclose(out, [[[[9.0]]]])

    def test_zero_kernel_outputs_bias(self, rng):
        layer = Conv2d(2, 3, 3)
        layer.params["weights"][:] = 0.0
        layer.params["bias"][:] = [1.5, -2.0, 0.25]
        out = layer.forward(rng.normal(size=(2, 2, 5, 5)))
        for fi, b in enumerate([1.5, -2.0, 0.25]):
            npt.assert_allclose(out[:, fi], b)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_direct_summation_oracle(self, rng, stride):
        for _ in range(20):
            x = rng.normal(size=(1, 2, 5, 5))
            layer = Conv2d(2, 3, 3, stride=stride, rng=rng)
            out = layer.forward(x)
            ref = conv_oracle(x, layer.params["weights"], layer.params["bias"], stride)
            npt.assert_allclose(out, ref, atol=1e-10)

    def test_linear_in_input(self, rng):
        layer = Conv2d(2, 3, 3, rng=rng)
        layer.params["bias"][:] = 0.0
        x1 = rng.normal(size=(1, 2, 6, 6))
        x2 = rng.normal(size=(1, 2, 6, 6))
        a, b = 0.7, -1.3
        lhs = layer.forward(a * x1 + b * x2)
        rhs = a * layer.forward(x1) + b * layer.forward(x2)
        npt.assert_allclose(lhs, rhs, atol=1e-10)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        layer = Conv2d(2, 2, 3, rng=rng)
        r = rng.normal(size=(2, 2, 3, 3))

        def f():
            return float(np.sum(r * layer.forward(x)))

        f()
        gx = layer.backward(r)
        assert rel_error(gx, finite_difference_grad(lambda _: f(), x)) < 1e-4
        assert rel_error(layer.grads["weights"],
                         finite_difference_grad(lambda _: f(), layer.params["weights"])) < 1e-4
        assert rel_error(layer.grads["bias"],
                         finite_difference_grad(lambda _: f(), layer.params["bias"])) < 1e-4

    def test_channel_mismatch_names_axis(self, rng):
        layer = Conv2d(2, 3, 3)
        with pytest.raises(ShapeError, match="axis 1"):
            layer.forward(rng.normal(size=(1, 3, 5, 5)))

    def test_input_smaller_than_kernel_rejected(self, rng):
        layer = Conv2d(1, 1, 5)
        with pytest.raises(ShapeError, match="kernel"):
            layer.forward(rng.normal(size=(1, 1, 4, 4)))

    def test_forward_is_pure(self, rng):
        layer = Conv2d(1, 2, 3, rng=rng)
        x = rng.normal(size=(1, 1, 6, 6))
        first = layer.forward(x)
        second = layer.forward(x)
        npt.assert_array_equal(first, second)

    def test_backward_without_forward_raises(self):
        layer = Conv2d(1, 1, 3)
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 1, 1, 1)))


class TestMaxPool2d:
    def test_two_by_two_example(self):
        out = MaxPool2d(2).forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        npt.assert_allclose(out, [[[[4.0]]]])

    def test_constant_input_routes_to_first_position(self):
        layer = MaxPool2d(2)
        out = layer.forward(np.full((1, 1, 2, 2), 7.0))
        npt.assert_allclose(out, 7.0)
        gx = layer.backward(np.array([[[[1.0]]]]))
        npt.assert_array_equal(gx, [[[[1.0, 0.0], [0.0, 0.0]]]])

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(20):
            x = rng.normal(size=(1, 1, 4, 4))
            npt.assert_array_equal(MaxPool2d(2).forward(x), pool_oracle(x, 2))

    def test_output_bounded_by_window_contents(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        out = MaxPool2d(2).forward(x)
        assert out.max() <= x.max()
        for i in range(3):
            for j in range(3):
                window_max = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
                npt.assert_array_equal(out[:, :, i, j], window_max)

    def test_non_divisible_extent_rejected(self, rng):
        with pytest.raises(ShapeError, match="divisible"):
            MaxPool2d(2).forward(rng.normal(size=(1, 1, 5, 4)))

    def test_backward_matches_finite_differences(self, rng):
        # a shuffled ramp keeps every window's argmax stable under +-h
        vals = (np.arange(32) + 1.0) / 32
        x = rng.permutation(vals).reshape(1, 2, 4, 4)
        layer = MaxPool2d(2)
        r = rng.normal(size=(1, 2, 2, 2))

        def f():
            return float(np.sum(r * layer.forward(x)))

        f()
        gx = layer.backward(r)
        assert rel_error(gx, finite_difference_grad(lambda _: f(), x)) < 1e-4


class TestLinear:
    def test_identity_weights(self):
        layer = Linear(3, 3)
        layer.params["weights"][:] = np.eye(3)
        layer.params["bias"][:] = 0.0
        x = np.array([[1.0, -2.0, 3.0]])
        npt.assert_array_equal(layer.forward(x), x)

    def test_zero_input_gives_bias(self):
        layer = Linear(4, 2)
        layer.params["bias"][:] = [0.5, -0.5]
        out = layer.forward(np.zeros((3, 4)))
        npt.assert_allclose(out, np.tile([0.5, -0.5], (3, 1)))

    def test_matches_double_loop_oracle(self, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 3))
            layer = Linear(3, 4, rng=rng)
            npt.assert_allclose(
                layer.forward(x),
                linear_oracle(x, layer.params["weights"], layer.params["bias"]),
                atol=1e-12,
            )

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 4))
        layer = Linear(4, 5, rng=rng)
        r = rng.normal(size=(3, 5))

        def f():
            return float(np.sum(r * layer.forward(x)))

        f()
        gx = layer.backward(r)
        assert rel_error(gx, finite_difference_grad(lambda _: f(), x)) < 1e-4
        assert rel_error(layer.grads["weights"],
                         finite_difference_grad(lambda _: f(), layer.params["weights"])) < 1e-4

    def test_inner_extent_mismatch(self, rng):
        with pytest.raises(ShapeError, match="axis 1"):
            Linear(4, 2).forward(rng.normal(size=(1, 5)))


class TestReLU:
    def test_basic_example(self):
        npt.assert_array_equal(ReLU().forward(np.array([[-1.0, 0.0, 2.0]])), [[0.0, 0.0, 2.0]])

    def test_all_negative_input_zeroes_everything(self, rng):
        layer = ReLU()
        x = -np.abs(rng.normal(size=(2, 5))) - 0.1
        out = layer.forward(x)
        npt.assert_array_equal(out, np.zeros_like(x))
        gx = layer.backward(np.ones_like(x))
        npt.assert_array_equal(gx, np.zeros_like(x))

    def test_gradient_passes_at_positive_points(self, rng):
        layer = ReLU()
        x = np.abs(rng.normal(size=(2, 5))) + 0.1
        layer.forward(x)
        up = rng.normal(size=(2, 5))
        npt.assert_array_equal(layer.backward(up), up)

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 4))
        x += np.where(x >= 0, 1e-2, -1e-2)
        layer = ReLU()
        r = rng.normal(size=(3, 4))

        def f():
            return float(np.sum(r * layer.forward(x)))

        f()
        assert rel_error(layer.backward(r), finite_difference_grad(lambda _: f(), x)) < 1e-4


def test_flatten_round_trips(rng):
    layer = Flatten()
    x = rng.normal(size=(2, 3, 4, 4))
    out = layer.forward(x)
    assert out.shape == (2, 48)
    npt.assert_array_equal(layer.backward(out), x)
