import numpy as np
import pytest

from wsqa.gmm import GmmError, gmm_fit_1d, subsample, two_component_threshold


def two_cluster_samples(seed, mu=(0.0, 10.0), sigma=0.1, n=1000):
    rng = np.random.default_rng(seed)
    return np.concatenate(
        [rng.normal(mu[0], sigma, n), rng.normal(mu[1], sigma, n)]
    )


class TestFit:
    def test_recovers_generating_means(self):
        model = gmm_fit_1d(two_cluster_samples(0), 2, seed=0)
        assert abs(model.means[0] - 0.0) < 0.05
        assert abs(model.means[1] - 10.0) < 0.05

    def test_single_component_closed_form(self):
        rng = np.random.default_rng(1)
        x = rng.normal(3.0, 2.0, 500)
        model = gmm_fit_1d(x, 1, seed=0)
        assert model.means[0] == pytest.approx(x.mean(), rel=1e-6)
        assert model.variances[0] == pytest.approx(x.var(), rel=1e-6)
        assert model.weights[0] == pytest.approx(1.0)

    def test_permutation_invariance(self):
        x = two_cluster_samples(2)
        rng = np.random.default_rng(3)
        shuffled = x.copy()
        rng.shuffle(shuffled)
        a = gmm_fit_1d(x, 2, seed=7)
        b = gmm_fit_1d(shuffled, 2, seed=7)
        assert np.allclose(a.means, b.means, atol=1e-6)
        assert np.allclose(a.weights, b.weights, atol=1e-6)

    def test_loglik_monotone_many_seeds(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            mus = sorted(rng.uniform(0, 50, 2))
            x = np.concatenate(
                [rng.normal(mus[0], rng.uniform(0.5, 3), 400),
                 rng.normal(mus[1], rng.uniform(0.5, 3), 300)]
            )
            model = gmm_fit_1d(x, 2, seed=seed)
            ll = np.array(model.log_likelihoods)
            assert np.all(np.diff(ll) >= -1e-9), f"seed {seed} not monotone"

    def test_components_sorted_by_mean(self):
        model = gmm_fit_1d(two_cluster_samples(4, mu=(20.0, -5.0)), 2, seed=0)
        assert model.means[0] < model.means[1]

    def test_all_equal_degenerate(self):
        with pytest.raises(GmmError):
            gmm_fit_1d(np.full(100, 3.3), 2, seed=0)

    def test_too_few_samples(self):
        with pytest.raises(GmmError):
            gmm_fit_1d(np.arange(15.0), 2, seed=0)

    def test_non_finite_rejected(self):
        x = two_cluster_samples(5)
        x[0] = np.nan
        with pytest.raises(GmmError):
            gmm_fit_1d(x, 2, seed=0)


class TestThreshold:
    def test_between_the_means(self):
        model = gmm_fit_1d(two_cluster_samples(6), 2, seed=0)
        thr = two_component_threshold(model)
        assert model.means[0] < thr < model.means[1]

    def test_separates_the_clusters(self):
        x = two_cluster_samples(7)
        thr = two_component_threshold(gmm_fit_1d(x, 2, seed=0))
        low, high = x[x < 5], x[x >= 5]
        assert (low < thr).all()
        assert (high > thr).all()

    def test_needs_two_components(self):
        model = gmm_fit_1d(np.random.default_rng(0).normal(0, 1, 100), 1, seed=0)
        with pytest.raises(GmmError):
            two_component_threshold(model)


class TestSubsample:
    def test_within_limit_identity(self):
        x = np.arange(50.0)
        assert subsample(x, 100, 0) is x

    def test_seeded_and_bounded(self):
        x = np.arange(1000.0)
        a = subsample(x, 100, 3)
        b = subsample(x, 100, 3)
        assert a.size == 100
        assert np.array_equal(a, b)
        assert not np.array_equal(a, subsample(x, 100, 4))
