import numpy as np
import pytest

from src.experiments.runners import perfectly_calibrated
from src.metrics import (
    SIGMA_STAR,
    W_STAR,
    _learned_sigmas,
    accuracy,
    ece,
    fit_rate,
    gen_gap,
    mse,
    nll,
    stat_rate_sweep,
)
from src.models import GaussianUnivariate, gaussian_nll
from src.numkit import make_rng


class TestBasicMetrics:
    def test_mse_accuracy_nll(self):
        assert mse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(2.0)
        probs = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
        labels = np.array([0, 1, 1])
        assert accuracy(probs, labels) == pytest.approx(2 / 3)
        assert nll(probs, labels) == pytest.approx(-np.mean(np.log([0.8, 0.7, 0.4])))

    def test_gen_gap_sign(self):
        assert gen_gap(0.9, 0.8, "accuracy") == pytest.approx(0.1)
        assert gen_gap(0.2, 0.5, "loss") == pytest.approx(0.3)
        with pytest.raises(ValueError):
            gen_gap(0.1, 0.2, "f1")


class TestEce:
    def test_hand_computed(self):
        probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.8, 0.2]])
        report = ece(probs, np.array([0, 1, 0]))
        assert report.ece == pytest.approx((0.1 + 0.6 + 0.2) / 3)
        assert report.n == 3

    def test_full_confidence_lands_in_last_bin(self):
        report = ece(np.array([[1.0, 0.0]]), np.array([0]), n_bins=15)
        assert report.bins[-1].count == 1
        assert report.ece == 0.0

    def test_perfectly_calibrated_predictions(self):
        probs, labels = perfectly_calibrated(7000, 4, make_rng(3))
        assert ece(probs, labels).ece < 0.01

    def test_csv_ends_with_ece_row(self):
        report = ece(np.array([[0.7, 0.3], [0.4, 0.6]]), np.array([0, 0]))
        lines = report.to_csv_text("config_hash=h seed=0").splitlines()
        assert lines[0].startswith("# ")
        assert lines[1] == "bin_low,bin_high,mean_conf,accuracy,count"
        assert lines[-1] == f"ece,{report.ece:.17g}"
        assert len(lines) == 2 + 15 + 1

    def test_row_order_does_not_matter(self, rng):
        probs = rng.dirichlet(np.ones(4), size=300)
        labels = rng.integers(0, 4, 300)
        order = rng.permutation(300)
        assert ece(probs[order], labels[order]).ece == pytest.approx(ece(probs, labels).ece, rel=1e-12)

    def test_matches_bin_by_bin_count(self, rng):
        probs = rng.dirichlet(np.full(3, 0.5), size=500)
        labels = rng.integers(0, 3, 500)
        confidence = probs.max(axis=1)
        correct = probs.argmax(axis=1) == labels
        expected = 0.0
        for b in range(10):
            low, high = b / 10, (b + 1) / 10
            inside = (confidence > low) & (confidence <= high)
            if b == 0:
                inside |= confidence == 0.0
            if inside.any():
                expected += inside.mean() * abs(correct[inside].mean() - confidence[inside].mean())
        assert ece(probs, labels, n_bins=10).ece == pytest.approx(expected, rel=1e-10)

    @pytest.mark.parametrize("probs, labels", [
        (np.array([[0.5, 0.6]]), np.array([0])),
        (np.array([[0.5, 0.5]]), np.array([0, 1])),
        (np.zeros((0, 2)), np.array([], dtype=int)),
    ])
    def test_invalid_inputs(self, probs, labels):
        with pytest.raises(ValueError):
            ece(probs, labels)


class TestRate:
    def test_exact_power_law(self):
        sizes = np.array([8, 16, 32, 64])
        fit = fit_rate(sizes, 3.0 / sizes)
        assert fit.slope == pytest.approx(-1.0)
        assert fit.violations == 0

    def test_rejects_unsorted_sizes(self):
        with pytest.raises(ValueError):
            fit_rate([16, 8], [1.0, 2.0])

    def test_sweep_rate_is_near_inverse_size(self):
        fit = stat_rate_sweep((8, 16, 32, 64, 128), repeats=60, seed=4)
        assert -1.5 < fit.slope < -0.5

    def test_sweep_is_seeded(self):
        a = stat_rate_sweep((8, 32), repeats=30, seed=1, steps=200)
        b = stat_rate_sweep((8, 32), repeats=30, seed=1, steps=200)
        np.testing.assert_array_equal(a.errors, b.errors)

    def test_learned_sigmas_follow_the_gaussian_model(self):
        noise = np.array([[0.3, -1.1, 0.8, 0.2], [1.5, -0.4, -0.9, 0.1]])
        sigmas = _learned_sigmas(noise, steps=3, lr_w=0.1, lr_sigma=0.25)
        for row, sigma in zip(noise, sigmas):
            g = GaussianUnivariate(0.0, 1.0)
            for _ in range(3):
                g.w -= 0.1 * gaussian_nll(g, [1.0], [W_STAR]).grad_w
                step = gaussian_nll(g, np.ones_like(row), W_STAR + SIGMA_STAR * row).grad_log_sigma
                g.sigma = float(np.exp(g.log_sigma - 0.25 * step))
            assert sigma == pytest.approx(g.sigma, rel=1e-12)

    def test_learned_sigma_reaches_reg_set_spread(self):
        noise = np.array([[0.3, -1.1, 0.8, 0.2], [1.5, -0.4, -0.9, 0.1]])
        sigmas = _learned_sigmas(noise, steps=1000, lr_w=0.1, lr_sigma=0.25)
        np.testing.assert_allclose(sigmas, SIGMA_STAR * np.sqrt(np.mean(noise ** 2, axis=1)),
                                   rtol=1e-8)

    def test_sweep_needs_enough_repeats(self):
        with pytest.raises(ValueError):
            stat_rate_sweep((8, 16), repeats=10)
