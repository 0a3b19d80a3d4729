import numpy as np
import pytest

from src.models import second_diff_matrix
from src.numkit import finite_diff, make_rng
from src.regops import (
    AugmentParams,
    DegenerateDirectionError,
    alpha_grad,
    augment_sample,
    clamp_sign_changes,
    deriv_norm_direction,
    l1_direction,
    l1_regularizer_drift,
    l1_step_signs,
    project,
    shift1d,
    shift1d_grad,
)


class TestProject:
    def test_components_sum_and_are_orthogonal(self, rng):
        g = rng.standard_normal(6)
        u = rng.standard_normal(6)
        parts = project(g, u)
        np.testing.assert_allclose(parts.g_rho + parts.g_perp, g)
        assert abs(parts.g_perp @ u) < 1e-12
        assert abs(abs(parts.g_rho @ u) - np.linalg.norm(parts.g_rho) * np.linalg.norm(u)) < 1e-10

    def test_zero_direction_is_degenerate(self):
        with pytest.raises(DegenerateDirectionError):
            project(np.ones(3), np.zeros(3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project(np.ones(3), np.ones(2))

    def test_l1_direction_skips_zero_weights(self):
        u = l1_direction([2.0, 0.0, -0.5])
        np.testing.assert_allclose(u, np.array([1.0, 0.0, -1.0]) / np.sqrt(2))

    def test_l1_direction_of_zero_weights(self):
        with pytest.raises(DegenerateDirectionError):
            l1_direction(np.zeros(4))

    def test_orthogonal_step_keeps_l1_norm(self, rng):
        w = np.array([1.0, -2.0, 0.5, 3.0])
        g = rng.standard_normal(4)
        assert l1_regularizer_drift(w, g, 1e-3) < 1e-12

    def test_deriv_norm_direction_degenerate_for_linear_coefficients(self):
        D = second_diff_matrix(10)
        with pytest.raises(DegenerateDirectionError):
            deriv_norm_direction(3.0 * np.arange(10.0) - 1.0, D)
        u = deriv_norm_direction(np.arange(10.0) ** 2, D)
        assert np.linalg.norm(u) == pytest.approx(1.0)

    @pytest.mark.parametrize("beta", [np.full(17, 2.5), 0.3 * np.arange(17.0) - 1.0, np.zeros(17)])
    def test_null_space_coefficients_are_degenerate(self, beta):
        with pytest.raises(DegenerateDirectionError):
            deriv_norm_direction(beta, second_diff_matrix(17))

    def test_small_curvature_is_still_a_direction(self):
        beta = 1e-3 * np.arange(17.0) ** 2
        u = deriv_norm_direction(beta, second_diff_matrix(17))
        assert np.linalg.norm(u) == pytest.approx(1.0)

    def test_l1_drift_stays_second_order_under_halving(self, rng):
        w = np.array([1.0, -2.0, 0.5, 3.0])
        g = rng.standard_normal(4)
        for eta in (0.1, 0.05, 0.025, 0.0125):
            assert l1_regularizer_drift(w, g, eta) <= 1e-12 + eta ** 2 * np.abs(g).sum()

    def test_deriv_norm_drift_decays_quadratically(self, rng):
        D = second_diff_matrix(12)
        beta = rng.standard_normal(12)
        g_perp = project(rng.standard_normal(12), deriv_norm_direction(beta, D)).g_perp
        level = np.sum((D @ beta) ** 2)
        drifts = [np.sum((D @ (beta - eta * g_perp)) ** 2) - level for eta in (0.2, 0.1, 0.05)]
        np.testing.assert_allclose(np.array(drifts[:-1]) / np.array(drifts[1:]), 4.0, rtol=1e-6)


class TestL1Orthants:
    def test_zero_weights_enter_or_freeze(self):
        w = np.array([1.0, 0.0, -2.0, 0.0])
        g = np.array([0.5, 3.0, -0.5, 0.1])
        signs, frozen = l1_step_signs(w, g)
        # active multiplier |0.5 + 0.5| / 2 = 0.5
        np.testing.assert_array_equal(signs, [1.0, -1.0, -1.0, 0.0])
        np.testing.assert_array_equal(frozen, [False, False, False, True])

    def test_all_zero_weights_are_degenerate(self):
        with pytest.raises(DegenerateDirectionError):
            l1_step_signs(np.zeros(3), np.ones(3))

    def test_projected_step_keeps_the_norm_of_active_weights(self, rng):
        w = np.array([1.5, 0.0, -0.7, 2.0, 0.0])
        g = rng.standard_normal(5)
        signs, frozen = l1_step_signs(w, g)
        step = project(np.where(frozen, 0.0, g), signs).g_perp
        assert abs(step @ signs) < 1e-12
        np.testing.assert_array_equal(step[frozen], 0.0)

    def test_clamp_sign_changes(self):
        after = np.array([-0.2, -0.5, 0.1, 0.3])
        crossed = clamp_sign_changes(np.array([1.0, -1.0, 0.5, 0.0]), after)
        np.testing.assert_array_equal(crossed, [True, False, False, False])
        np.testing.assert_array_equal(after, [0.0, -0.5, 0.1, 0.3])


class TestShift:
    def test_integer_shift_is_roll(self):
        x = np.arange(8.0)
        np.testing.assert_allclose(shift1d(x, 3.0), np.roll(x, 3))
        np.testing.assert_allclose(shift1d(x, -2.0), np.roll(x, -2))

    def test_half_shift_interpolates(self):
        x = np.array([0.0, 2.0, 4.0, 6.0])
        np.testing.assert_allclose(shift1d(x, 0.5), 0.5 * x + 0.5 * np.roll(x, 1))

    def test_gradient_between_integers(self, rng):
        x = rng.standard_normal(10)
        weights = rng.standard_normal(10)
        s = 1.3
        numeric = finite_diff(lambda v: weights @ shift1d(x, v[0]), np.array([s]))[0]
        assert weights @ shift1d_grad(x, s) == pytest.approx(numeric, rel=1e-6)

    def test_batch_uses_one_shift_per_row(self):
        x = np.tile(np.arange(5.0), (2, 1))
        out = shift1d(x, np.array([1.0, 2.0]))
        np.testing.assert_allclose(out[0], np.roll(x[0], 1))
        np.testing.assert_allclose(out[1], np.roll(x[1], 2))

    def test_too_short(self):
        with pytest.raises(ValueError):
            shift1d(np.ones(1), 0.5)


class TestAugment:
    def test_zero_alpha_is_identity(self, rng):
        x = rng.standard_normal((4, 8))
        draw = augment_sample(x, AugmentParams(0.0), rng)
        np.testing.assert_allclose(draw.x_aug, x)
        assert draw.u.shape == (4,)

    def test_alpha_gradient(self, rng):
        x = rng.standard_normal((3, 12))
        c = rng.standard_normal((3, 12))
        params = AugmentParams(1.7)
        draw = augment_sample(x, params, make_rng(5))

        def loss(a):
            return np.sum(c * shift1d(x, a[0] * draw.u))

        numeric = finite_diff(loss, np.array([params.alpha]))[0]
        assert alpha_grad(draw, c) == pytest.approx(numeric, rel=1e-5)

    def test_clamp(self):
        p = AugmentParams(5.0, alpha_max=2.0)
        p.clamp()
        assert p.alpha == 2.0
        p.alpha = -1.0
        p.clamp()
        assert p.alpha == 0.0
        with pytest.raises(ValueError):
            AugmentParams(-0.1)
