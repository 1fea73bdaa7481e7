import numpy as np
import numpy.testing as npt
import pytest

from kaf_oneshot.errors import NumericError, ParameterError, ShapeError
from kaf_oneshot.tensor import as_tensor, finite_difference_grad, rel_error, require_axis, require_finite


def test_finite_difference_on_sum_is_ones(rng):
    x = rng.normal(size=(3, 4))
    grad = finite_difference_grad(lambda t: float(t.sum()), x, h=1e-5)
    npt.assert_allclose(grad, np.ones_like(x), atol=1e-9)


def test_finite_difference_on_half_norm_is_x(rng):
    x = rng.normal(size=(5,))
    grad = finite_difference_grad(lambda t: 0.5 * float(np.dot(t, t)), x, h=1e-5)
    npt.assert_allclose(grad, x, atol=1e-7)


def test_finite_difference_rejects_bad_h(rng):
    with pytest.raises(ParameterError):
        finite_difference_grad(lambda t: float(t.sum()), rng.normal(size=3), h=0.0)


def test_finite_difference_rejects_nonfinite_f():
    with pytest.raises(NumericError):
        finite_difference_grad(lambda t: float("nan"), np.ones(2))


def test_finite_difference_does_not_change_x(rng):
    x = rng.normal(size=(4,))
    before = x.copy()
    finite_difference_grad(lambda t: float((t**2).sum()), x)
    npt.assert_array_equal(x, before)


def test_as_tensor_returns_contiguous_float64():
    t = as_tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float64 and t.flags.c_contiguous


def test_require_axis_names_offending_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        require_axis(np.zeros((2, 3)), 1, 7, "thing")


def test_require_finite_flags_nan():
    x = np.ones(4)
    x[2] = np.nan
    with pytest.raises(NumericError, match="index 2"):
        require_finite(x, "x")


def test_rel_error_zero_for_identical(rng):
    a = rng.normal(size=(3, 3))
    assert rel_error(a, a.copy()) == 0.0


def test_rel_error_floor_guards_tiny_entries():
    a = np.array([1e-9])
    b = np.array([2e-9])
    assert rel_error(a, b) < 1e-5
