import numpy as np
import pytest

from src.models import (
    RHO_MIN,
    GaussianUnivariate,
    LinearModel,
    LinearReparam,
    NoisyMlp,
    SplineModel,
    bspline_design,
    gaussian_nll,
    gaussian_nll_terms,
    layer_norm,
    linear_forward,
    linear_grads,
    load_checkpoint,
    loss_and_grads,
    mc_loss_and_grads,
    mc_predict,
    mlp_forward,
    sample_noise,
    save_checkpoint,
    second_diff_matrix,
)
from src.numkit import finite_diff, make_rng

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


class TestLinearReparam:
    def test_from_weights_roundtrip(self):
        w = np.array([3.0, -4.0])
        m = LinearReparam.from_weights(w, bias=0.5)
        assert m.rho == pytest.approx(5.0)
        np.testing.assert_allclose(m.weights(), w)

    def test_zero_weights_map_to_rho_min(self):
        m = LinearReparam.from_weights(np.zeros(3))
        assert m.rho == RHO_MIN
        np.testing.assert_allclose(m.theta, [1.0, 0.0, 0.0])

    def test_direction_must_be_unit(self):
        with pytest.raises(ValueError, match="unit vector"):
            LinearReparam(1.0, np.array([1.0, 1.0]))

    def test_forward_rejects_wrong_width(self, rng):
        m = LinearReparam.random(3, rng)
        with pytest.raises(ValueError):
            linear_forward(m, np.ones((4, 2)))

    def test_gradients_match_finite_differences(self, rng):
        X = rng.standard_normal((20, 4))
        y = rng.standard_normal(20)
        m = LinearReparam.random(4, rng, rho=1.7)
        tangent, grad_rho = linear_grads(m, X, y)

        def loss_rho(r):
            return np.mean((r[0] * X @ m.theta - y) ** 2)

        def loss_theta(v):
            return np.mean((m.rho * X @ v - y) ** 2)

        np.testing.assert_allclose(grad_rho, finite_diff(loss_rho, np.array([m.rho]))[0], rtol=GRAD_RTOL)
        full = finite_diff(loss_theta, m.theta)
        expected = full - m.theta * (m.theta @ full)
        np.testing.assert_allclose(tangent, expected, rtol=GRAD_RTOL, atol=GRAD_ATOL)
        assert abs(tangent @ m.theta) < 1e-10

    def test_plain_linear_model(self):
        m = LinearModel.zeros(3, bias=True)
        m.w[:] = [1.0, 2.0, 3.0]
        m.bias = 1.0
        np.testing.assert_allclose(m.predict(np.eye(3)), [2.0, 3.0, 4.0])


class TestSpline:
    def test_basis_is_partition_of_unity(self):
        B = bspline_design(np.linspace(0, 1, 50), knots=15)
        assert B.shape == (50, 17)
        np.testing.assert_allclose(B.sum(axis=1), 1.0)

    def test_inputs_outside_unit_interval(self):
        with pytest.raises(ValueError):
            bspline_design([0.5, 1.2])

    def test_penalty_matrix_trace(self):
        D = second_diff_matrix(17)
        assert D.shape == (15, 17)
        assert np.trace(D.T @ D) == pytest.approx(17.0)
        np.testing.assert_allclose(D @ np.arange(17.0), 0.0, atol=1e-12)

    def test_linear_beta_has_zero_penalty(self):
        m = SplineModel.create(knots=8)
        m.beta = 2.0 * np.arange(m.n_basis) + 1.0
        assert m.penalty() == pytest.approx(0.0, abs=1e-20)


def small_net(rng, task="classification", log_sigma=-1.0):
    out = 3 if task == "classification" else 1
    return NoisyMlp.create([3, 5, 4, out], rng, log_sigma, task)


class TestNoisyMlp:
    def test_parameter_groups(self, rng):
        m = small_net(rng)
        assert set(m.theta_params()) == {"W0", "W1", "head_W", "head_b"}
        assert set(m.rho_params()) == {"log_sigma"}
        assert m.widths == [5, 4]

    def test_needs_hidden_layer(self, rng):
        with pytest.raises(ValueError):
            NoisyMlp.create([3, 2], rng)

    def test_disabled_noise_is_deterministic(self, rng):
        m = small_net(rng, log_sigma=-np.inf)
        x = rng.standard_normal((6, 3))
        clean, _ = mlp_forward(m, x)
        noisy, _ = mlp_forward(m, x, sample_noise(m, 6, rng))
        np.testing.assert_array_equal(clean, noisy)

    @pytest.mark.parametrize("task", ["classification", "regression"])
    def test_backward_matches_finite_differences(self, rng, task):
        m = small_net(rng, task)
        x = rng.standard_normal((8, 3))
        y = rng.integers(0, 3, size=8) if task == "classification" else rng.standard_normal(8)
        eps = sample_noise(m, 8, rng)
        result = loss_and_grads(m, x, y, eps)

        for name, param in {**m.theta_params(), **m.rho_params()}.items():
            original = param.copy()

            def loss(v, param=param):
                param[...] = v
                return loss_and_grads(m, x, y, eps).loss

            numeric = finite_diff(loss, original)
            param[...] = original
            np.testing.assert_allclose(result.grads[name], numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL,
                                       err_msg=name)

    def test_input_gradient(self, rng):
        m = small_net(rng)
        x = rng.standard_normal((4, 3))
        y = np.array([0, 1, 2, 0])
        eps = sample_noise(m, 4, rng)
        d_input = loss_and_grads(m, x, y, eps).d_input
        numeric = finite_diff(lambda v: loss_and_grads(m, v, y, eps).loss, x)
        np.testing.assert_allclose(d_input, numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL)

    @pytest.mark.parametrize("space", ["prob", "logit"])
    def test_mc_gradient_of_log_sigma(self, rng, space):
        m = small_net(rng)
        x = rng.standard_normal((10, 3))
        y = rng.integers(0, 3, size=10)
        result = mc_loss_and_grads(m, x, y, 3, make_rng(9), space)

        def loss(v):
            m.log_sigma = v.copy()
            return mc_loss_and_grads(m, x, y, 3, make_rng(9), space).loss

        original = m.log_sigma.copy()
        numeric = finite_diff(loss, original)
        m.log_sigma = original
        np.testing.assert_allclose(result.grads["log_sigma"], numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL)

    def test_mc_predict_probabilities(self, rng):
        m = small_net(rng, log_sigma=0.0)
        probs = mc_predict(m, rng.standard_normal((5, 3)), 4, rng)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_layer_norm_standardizes_rows(self, rng):
        u = 3.0 * rng.standard_normal((6, 16)) + 2.0
        u_hat, inv_std = layer_norm(u)
        np.testing.assert_allclose(u_hat.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(u_hat.var(axis=1), 1.0, rtol=1e-4)
        np.testing.assert_allclose(inv_std[:, 0], 1.0 / np.sqrt(u.var(axis=1) + 1e-5))

    def test_mc_predict_variance_shrinks_as_one_over_k(self, rng):
        m = NoisyMlp.create([3, 8, 1], rng, 0.0, task="regression")
        x = rng.standard_normal((50, 3))
        spread = {
            K: np.array([mc_predict(m, x, K, rng)[:, 0] for _ in range(400)]).var(axis=0).mean()
            for K in (1, 4, 16)
        }
        assert spread[1] / spread[4] == pytest.approx(4.0, rel=0.2)
        assert spread[1] / spread[16] == pytest.approx(16.0, rel=0.2)

    def test_mc_arguments_checked(self, rng):
        m = small_net(rng)
        with pytest.raises(ValueError):
            mc_predict(m, np.zeros((1, 3)), 0, rng)
        with pytest.raises(ValueError):
            mc_predict(m, np.zeros((1, 3)), 2, rng, space="median")


class TestGaussian:
    def test_nll_gradients(self):
        g = GaussianUnivariate(0.3, 1.5)
        x, y = np.array([1.0, 2.0]), np.array([0.5, -1.0])
        fit = gaussian_nll(g, x, y)
        w_num = finite_diff(lambda v: gaussian_nll(GaussianUnivariate(v[0], 1.5), x, y).loss,
                            np.array([0.3]))
        s_num = finite_diff(lambda v: gaussian_nll(GaussianUnivariate(0.3, np.exp(v[0])), x, y).loss,
                            np.array([np.log(1.5)]))
        assert fit.grad_w == pytest.approx(w_num[0], rel=GRAD_RTOL)
        assert fit.grad_log_sigma == pytest.approx(s_num[0], rel=GRAD_RTOL)

    def test_row_terms_match_one_model_at_a_time(self):
        x = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
        y = np.array([[0.5, -1.0, 2.0], [1.0, 1.0, -2.0]])
        w, log_sigma = np.array([0.3, -1.2]), np.log([1.5, 0.4])
        terms = gaussian_nll_terms(w, log_sigma, x, y)
        for row in range(2):
            fit = gaussian_nll(GaussianUnivariate(w[row], np.exp(log_sigma[row])), x[row], y[row])
            np.testing.assert_allclose(
                [terms.loss[row], terms.grad_w[row], terms.grad_log_sigma[row]],
                [fit.loss, fit.grad_w, fit.grad_log_sigma], rtol=1e-12)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            GaussianUnivariate(0.0, 0.0)


class TestCheckpoint:
    def test_noisy_mlp_roundtrip_is_bit_exact(self, rng, tmp_path):
        m = small_net(rng)
        m.log_sigma[1] = -np.inf
        path = save_checkpoint(m, tmp_path / "net.json", "noise_scales")
        loaded, spec = load_checkpoint(path)
        assert spec == "noise_scales"
        for name, value in {**m.theta_params(), **m.rho_params()}.items():
            np.testing.assert_array_equal(value, {**loaded.theta_params(), **loaded.rho_params()}[name])

    def test_linear_reparam_roundtrip(self, rng, tmp_path):
        m = LinearReparam.random(4, rng, rho=2.5, bias=0.25)
        loaded, _ = load_checkpoint(save_checkpoint(m, tmp_path / "lin.json", "l2_reparam"))
        assert loaded.rho == m.rho and loaded.bias == m.bias
        np.testing.assert_array_equal(loaded.theta, m.theta)
