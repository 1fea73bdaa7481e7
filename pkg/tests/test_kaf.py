import numpy as np
import numpy.testing as npt
import pytest

from kaf_oneshot.errors import ParameterError
from kaf_oneshot.kaf import (
    KafParams,
    elu,
    gram_matrix,
    init_alpha,
    kaf2d_backward,
    kaf2d_forward,
    kaf_backward,
    kaf_forward,
    make_dictionary,
    psd_check,
)
from kaf_oneshot.tensor import finite_difference_grad, rel_error


def kaf_oracle(s, d, alpha, gamma):
    """Explicit sum over dictionary terms, element by element."""
    out = np.zeros_like(s, dtype=np.float64)
    for i in range(len(d)):
        out += alpha[i] * np.exp(-gamma * (s - d[i]) ** 2)
    return out


def kaf2d_oracle(s1, s2, d, alpha, gamma):
    """Brute-force double loop over the D x D grid for one channel pair."""
    dd = len(d)
    out = np.zeros_like(s1, dtype=np.float64)
    for i in range(dd):
        for j in range(dd):
            dist2 = (s1 - d[i]) ** 2 + (s2 - d[j]) ** 2
            out += alpha[i * dd + j] * np.exp(-gamma * dist2)
    return out


class TestMakeDictionary:
    def test_three_point_unit_bound(self):
        d, gamma = make_dictionary(3, 1.0)
        npt.assert_allclose(d, [-1.0, 0.0, 1.0])
        assert gamma == 0.5  # delta = 1 -> gamma = 1/2

    def test_two_point_bound_two(self):
        d, gamma = make_dictionary(2, 2.0)
        npt.assert_allclose(d, [-2.0, 2.0])
        assert gamma == 1.0 / 32.0  # delta = 4

    @pytest.mark.parametrize("d_size,bound", [(5, 3.0), (8, 1.5), (21, 4.0)])
    def test_symmetric_about_zero(self, d_size, bound):
        d, _ = make_dictionary(d_size, bound)
        npt.assert_allclose(d, -d[::-1], atol=1e-15)

    def test_rejects_small_d(self):
        with pytest.raises(ParameterError):
            make_dictionary(1, 1.0)

    def test_rejects_nonpositive_bound(self):
        with pytest.raises(ParameterError):
            make_dictionary(5, 0.0)


class TestKafParams:
    def test_rejects_uneven_spacing(self):
        with pytest.raises(ParameterError, match="evenly spaced"):
            KafParams(np.array([0.0, 1.0, 3.0]), np.zeros(3), 1.0, per_channel=False)

    def test_rejects_decreasing_dictionary(self):
        with pytest.raises(ParameterError, match="increasing"):
            KafParams(np.array([1.0, 0.0]), np.zeros(2), 1.0, per_channel=False)

    def test_rejects_bad_alpha_width(self):
        with pytest.raises(ParameterError, match="alpha"):
            KafParams(np.linspace(-1, 1, 4), np.zeros(5), 1.0, per_channel=False)

    def test_dictionary_is_frozen(self):
        p = KafParams(np.linspace(-1, 1, 4), np.zeros(4), 1.0, per_channel=False)
        with pytest.raises(ValueError):
            p.dictionary[0] = 5.0

    def test_grid_is_cartesian_product(self):
        d, gamma = make_dictionary(3, 1.0)
        p = KafParams(d, np.zeros(9), gamma, per_channel=False)
        npt.assert_allclose(p.grid[4], [0.0, 0.0])  # row i*D+j = (d_i, d_j)
        npt.assert_allclose(p.grid[2], [-1.0, 1.0])


class TestKafForward:
    def test_zero_alpha_gives_zero(self, rng):
        d, gamma = make_dictionary(7, 2.0)
        p = KafParams(d, np.zeros(7), gamma, per_channel=False)
        npt.assert_array_equal(kaf_forward(rng.normal(size=(4, 3)), p), np.zeros((4, 3)))

    def test_kernel_center_is_one(self):
        p = KafParams(np.array([0.0]), np.array([1.0]), 1.0, per_channel=False)
        npt.assert_allclose(kaf_forward(np.array([0.0]), p), [1.0])

    def test_kernel_at_unit_offset(self):
        p = KafParams(np.array([0.0]), np.array([1.0]), 1.0, per_channel=False)
        npt.assert_allclose(kaf_forward(np.array([1.0]), p), [np.exp(-1.0)], rtol=1e-12)

    def test_matches_oracle_shared(self, rng):
        d, gamma = make_dictionary(9, 3.0)
        alpha = rng.normal(0, 0.3, size=9)
        p = KafParams(d, alpha, gamma, per_channel=False)
        s = rng.normal(size=(5, 4))
        npt.assert_allclose(kaf_forward(s, p), kaf_oracle(s, d, alpha, gamma), atol=1e-12)

    def test_matches_oracle_per_channel(self, rng):
        d, gamma = make_dictionary(6, 2.0)
        alpha = rng.normal(0, 0.3, size=(3, 6))
        p = KafParams(d, alpha, gamma, per_channel=True)
        s = rng.normal(size=(4, 3, 2, 2))
        out = kaf_forward(s, p)
        for c in range(3):
            npt.assert_allclose(out[:, c], kaf_oracle(s[:, c], d, alpha[c], gamma), atol=1e-12)

    def test_linear_in_alpha(self, rng):
        d, gamma = make_dictionary(8, 2.5)
        a1 = rng.normal(size=8)
        a2 = rng.normal(size=8)
        s = rng.normal(size=(6,))
        ca, cb = 0.6, -1.7
        combined = kaf_forward(s, KafParams(d, ca * a1 + cb * a2, gamma, per_channel=False))
        separate = ca * kaf_forward(s, KafParams(d, a1, gamma, per_channel=False)) + \
            cb * kaf_forward(s, KafParams(d, a2, gamma, per_channel=False))
        npt.assert_allclose(combined, separate, atol=1e-12)

    def test_bounded_by_alpha_l1_norm(self, rng):
        d, gamma = make_dictionary(11, 3.0)
        alpha = rng.normal(0, 0.5, size=11)
        p = KafParams(d, alpha, gamma, per_channel=False)
        s = np.linspace(-10, 10, 500)
        assert np.all(np.abs(kaf_forward(s, p)) <= np.abs(alpha).sum() + 1e-12)

    def test_smooth_bounded_third_derivative(self, rng):
        # ReLU-style kinks would blow up the discrete third derivative as
        # h -> 0; the kernel mixture keeps it under an analytic bound.
        d, gamma = make_dictionary(12, 3.0)
        alpha = rng.normal(0, 0.3, size=12)
        p = KafParams(d, alpha, gamma, per_channel=False)
        grid = np.linspace(-4.0, 4.0, 1000)
        h = grid[1] - grid[0]
        g = kaf_forward(grid, p)
        second = np.diff(g, 2) / h**2
        third = np.diff(g, 3) / h**3
        bound = 5.0 * np.abs(alpha).sum() * gamma**1.5
        assert np.all(np.isfinite(second))
        assert np.abs(third).max() <= bound


class TestKafBackward:
    def test_alpha_gradient_is_one_at_center(self):
        p = KafParams(np.array([0.0]), np.array([0.7]), 1.0, per_channel=False)
        galpha, _ = kaf_backward(np.array([0.0]), np.array([1.0]), p)
        npt.assert_allclose(galpha, [1.0])

    def test_input_gradient_zero_at_kernel_peak(self):
        p = KafParams(np.array([0.5]), np.array([2.0]), 1.3, per_channel=False)
        _, gs = kaf_backward(np.array([0.5]), np.array([1.0]), p)
        npt.assert_allclose(gs, [0.0], atol=1e-15)

    def test_gradients_match_finite_differences(self, rng):
        d, gamma = make_dictionary(7, 2.0)
        alpha = rng.normal(0, 0.3, size=(3, 7))
        p = KafParams(d, alpha, gamma, per_channel=True)
        s = rng.normal(size=(4, 3))
        up = rng.normal(size=(4, 3))
        galpha, gs = kaf_backward(s, up, p)
        fd_s = finite_difference_grad(lambda t: float(np.sum(up * kaf_forward(t, p))), s.copy())
        assert rel_error(gs, fd_s) < 1e-4
        fd_a = finite_difference_grad(lambda _: float(np.sum(up * kaf_forward(s, p))), p.alpha)
        assert rel_error(galpha, fd_a) < 1e-4


class TestKaf2d:
    def test_zero_alpha(self, rng):
        d, gamma = make_dictionary(3, 1.0)
        p = KafParams(d, np.zeros(9), gamma, per_channel=False)
        npt.assert_array_equal(kaf2d_forward(rng.normal(size=(2, 4)), p), np.zeros((2, 2)))

    def test_one_hot_center_kernel(self):
        d, _ = make_dictionary(3, 1.0)
        alpha = np.zeros(9)
        alpha[4] = 1.0  # grid point (0, 0)
        p = KafParams(d, alpha, 1.0, per_channel=False)
        out = kaf2d_forward(np.array([[0.0, 0.0]]), p)
        npt.assert_allclose(out, [[1.0]])

    def test_matches_grid_sum_oracle(self, rng):
        d, gamma = make_dictionary(4, 2.0)
        for _ in range(50):
            alpha = rng.normal(0, 0.3, size=16)
            p = KafParams(d, alpha, gamma, per_channel=False)
            s = rng.normal(size=(3, 6))
            out = kaf2d_forward(s, p)
            for pair in range(3):
                ref = kaf2d_oracle(s[:, 2 * pair], s[:, 2 * pair + 1], d, alpha, gamma)
                npt.assert_allclose(out[:, pair], ref, atol=1e-12)

    def test_odd_channel_count_rejected(self, rng):
        d, gamma = make_dictionary(3, 1.0)
        p = KafParams(d, np.zeros(9), gamma, per_channel=False)
        from kaf_oneshot.errors import ShapeError

        with pytest.raises(ShapeError, match="odd"):
            kaf2d_forward(rng.normal(size=(2, 5)), p)

    def test_zero_upstream_gives_zero_gradients(self, rng):
        d, gamma = make_dictionary(3, 1.0)
        p = KafParams(d, rng.normal(size=9), gamma, per_channel=False)
        s = rng.normal(size=(2, 4))
        galpha, gs = kaf2d_backward(s, np.zeros((2, 2)), p)
        npt.assert_array_equal(galpha, np.zeros(9))
        npt.assert_array_equal(gs, np.zeros((2, 4)))

    def test_input_gradient_zero_at_grid_center(self):
        d, _ = make_dictionary(3, 1.0)
        alpha = np.zeros(9)
        alpha[4] = 1.0
        p = KafParams(d, alpha, 1.0, per_channel=False)
        _, gs = kaf2d_backward(np.array([[0.0, 0.0]]), np.array([[1.0]]), p)
        npt.assert_allclose(gs, [[0.0, 0.0]], atol=1e-15)

    def test_gradients_match_finite_differences(self, rng):
        d, gamma = make_dictionary(3, 1.5)
        alpha = rng.normal(0, 0.3, size=(2, 9))
        p = KafParams(d, alpha, gamma, per_channel=True)
        s = rng.normal(size=(3, 4))
        up = rng.normal(size=(3, 2))
        galpha, gs = kaf2d_backward(s, up, p)
        fd_s = finite_difference_grad(lambda t: float(np.sum(up * kaf2d_forward(t, p))), s.copy())
        assert rel_error(gs, fd_s) < 1e-4
        fd_a = finite_difference_grad(lambda _: float(np.sum(up * kaf2d_forward(s, p))), p.alpha)
        assert rel_error(galpha, fd_a) < 1e-4


class TestPsd:
    @pytest.mark.parametrize("d_size", [2, 5, 10, 20])
    def test_gram_lambda_min_nonnegative(self, d_size):
        d, gamma = make_dictionary(d_size, 3.0)
        p = KafParams(d, np.zeros(d_size), gamma, per_channel=False)
        assert psd_check(p) >= -1e-8

    def test_single_point_gram_is_one(self):
        p = KafParams(np.array([0.0]), np.array([0.0]), 1.0, per_channel=False)
        assert psd_check(p) == pytest.approx(1.0)

    def test_quadratic_form_nonnegative_for_random_alpha(self, rng):
        d, gamma = make_dictionary(10, 3.0)
        p = KafParams(d, np.zeros(10), gamma, per_channel=False)
        k = gram_matrix(p)
        for _ in range(50):
            alpha = rng.normal(size=10)
            assert alpha @ k @ alpha >= -1e-8

    def test_grid_gram_matches_kronecker_square(self):
        # the 2-D kernel factorizes, so the grid Gram is K (x) K and its
        # smallest eigenvalue is lambda_min(K)^2
        d, gamma = make_dictionary(4, 2.0)
        p = KafParams(d, np.zeros(16), gamma, per_channel=False)
        grid = p.grid
        diff2 = ((grid[:, None, :] - grid[None, :, :]) ** 2).sum(axis=2)
        grid_gram = np.exp(-gamma * diff2)
        k = gram_matrix(p)
        npt.assert_allclose(grid_gram, np.kron(k, k), atol=1e-12)
        lam_grid = np.linalg.eigvalsh(grid_gram)[0]
        assert lam_grid >= -1e-8
        npt.assert_allclose(lam_grid, np.linalg.eigvalsh(k)[0] ** 2, atol=1e-10)


class TestInitAlpha:
    def test_zero_target_fits_zero(self):
        d, gamma = make_dictionary(8, 2.0)
        p = KafParams(d, np.zeros(8), gamma, per_channel=False)
        alpha = init_alpha(p, "fit_target", target=lambda x: np.zeros_like(x))
        npt.assert_allclose(alpha, np.zeros(8), atol=1e-12)

    def test_round_trip_recovers_alpha_within_ridge_bias(self, rng):
        d, gamma = make_dictionary(10, 3.0)
        alpha_true = rng.normal(0, 0.3, size=10)
        p = KafParams(d, alpha_true, gamma, per_channel=False)
        g_at_dict = kaf_forward(d.copy(), p)
        fit = init_alpha(p, "fit_target", target=lambda _: g_at_dict)
        assert np.abs(fit - alpha_true).max() < 1e-2

    def test_random_mode_is_seeded(self):
        d, gamma = make_dictionary(6, 2.0)
        p = KafParams(d, np.zeros((4, 6)), gamma, per_channel=True)
        a1 = init_alpha(p, "random", rng=7)
        a2 = init_alpha(p, "random", rng=7)
        npt.assert_array_equal(a1, a2)
        assert a1.shape == (4, 6)

    def test_fit_target_requires_target(self):
        d, gamma = make_dictionary(6, 2.0)
        p = KafParams(d, np.zeros(6), gamma, per_channel=False)
        with pytest.raises(ParameterError):
            init_alpha(p, "fit_target")

    def test_elu_warm_start_tracks_elu_on_dictionary(self):
        d, gamma = make_dictionary(12, 3.0)
        p = KafParams(d, np.zeros(12), gamma, per_channel=False)
        alpha = init_alpha(p, "fit_target", target=elu)
        fitted = kaf_forward(d.copy(), KafParams(d, alpha, gamma, per_channel=False))
        npt.assert_allclose(fitted, elu(d), atol=0.05)
