import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from camera.density import GaussianMixture, NominalDensity, em_fit, gmm_logpdf, gmm_sample
from camera.errors import DegenerateSamples
from camera.mfgp import Domain


def naive_logpdf(g, X):
    # direct sum of product-of-normals densities, no log-sum-exp
    tot = np.zeros(X.shape[0])
    for w, m, v in zip(g.weights, g.means, g.variances):
        tot += w * np.prod(stats.norm.pdf(X, m, np.sqrt(v)), axis=1)
    return np.log(tot)


class TestMixture:
    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
        with pytest.raises(ValueError):
            GaussianMixture([1.0], [[0.0]], [[0.0]])

    def test_standard_normal_mode(self):
        g = GaussianMixture([1.0], [[0.0]], [[1.0]])
        assert gmm_logpdf(g, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert gmm_logpdf(g, 0.0) == pytest.approx(-0.918939, abs=1e-6)

    def test_symmetric_pair(self):
        g = GaussianMixture([0.5, 0.5], [[-1.5], [1.5]], [[1.0], [1.0]])
        single = GaussianMixture([1.0], [[1.5]], [[1.0]])
        assert gmm_logpdf(g, np.array([0.0])) == pytest.approx(gmm_logpdf(single, np.array([0.0])), abs=1e-14)

    def test_matches_naive_sum(self, rng):
        K, d = 4, 3
        w = rng.dirichlet(np.ones(K))
        g = GaussianMixture(w, rng.normal(size=(K, d)), rng.uniform(0.2, 2.0, size=(K, d)))
        X = rng.normal(size=(100, d))
        assert np.allclose(gmm_logpdf(g, X), naive_logpdf(g, X), rtol=1e-12, atol=0)

    def test_finite_far_away(self):
        g = GaussianMixture([0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]], [[1e-6, 1e-6], [1e-6, 1e-6]])
        assert np.isfinite(gmm_logpdf(g, np.array([1e3, -1e3])))

    def test_integrates_to_one_2d(self):
        g = GaussianMixture([0.3, 0.7], [[0.0, 0.0], [2.0, -1.0]], [[0.5, 1.0], [0.3, 0.2]])
        a = np.linspace(-8, 10, 500)
        b = np.linspace(-9, 8, 500)
        A, B = np.meshgrid(a, b, indexing="ij")
        P = np.exp(gmm_logpdf(g, np.column_stack([A.ravel(), B.ravel()]))).reshape(A.shape)
        total = np.trapezoid(np.trapezoid(P, b, axis=1), a)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_json_round_trip(self, rng):
        g = GaussianMixture([0.25, 0.75], rng.normal(size=(2, 2)), rng.uniform(0.1, 1, size=(2, 2)))
        h = GaussianMixture.from_json(g.to_json())
        assert np.array_equal(g.weights, h.weights) and np.array_equal(g.means, h.means)


class TestSampling:
    def test_deterministic(self):
        g = GaussianMixture([0.3, 0.7], [[0.0], [5.0]], [[1.0], [1.0]])
        assert np.array_equal(gmm_sample(g, 50, 3), gmm_sample(g, 50, 3))

    def test_component_frequencies(self):
        g = GaussianMixture([0.3, 0.7], [[-50.0], [50.0]], [[1.0], [1.0]])
        x = gmm_sample(g, 100_000, 0)
        assert abs(np.mean(x < 0) - 0.3) <= 0.01

    def test_point_mass(self):
        g = GaussianMixture([1.0], [[2.0, -1.0]], [[1e-10, 1e-10]])
        assert np.allclose(gmm_sample(g, 100, 0), [2.0, -1.0], atol=1e-4)


class TestEm:
    def test_single_component_is_mle(self, rng):
        X = rng.normal([1.0, -2.0], [0.5, 2.0], size=(400, 2))
        g = em_fit(X, K=1, seed=0)
        assert np.allclose(g.means[0], X.mean(0), atol=1e-12)
        assert np.allclose(g.variances[0], X.var(0), rtol=1e-10)

    def test_two_clusters(self):
        r = np.random.default_rng(5)
        X = np.vstack([r.normal(0, 1, (500, 2)), r.normal(10, 1, (500, 2))])
        g = em_fit(X, K=2, seed=0)
        order = np.argsort(g.means[:, 0])
        assert np.allclose(g.means[order], [[0, 0], [10, 10]], atol=0.2)
        assert np.allclose(g.weights, 0.5, atol=0.05)

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_likelihood_monotone(self, seed, K):
        r = np.random.default_rng(seed)
        X = np.vstack([r.normal(size=(40, 2)), r.normal(4, 0.5, size=(25, 2))])
        h = np.array(em_fit(X, K=K, seed=seed, max_iters=60).ll_history)
        assert np.all(np.diff(h) >= -1e-9)

    def test_fewer_samples_than_components(self, rng):
        g = em_fit(rng.normal(size=(5, 2)), K=25, seed=0)
        assert g.n_components == 5

    def test_identical_samples_warn(self):
        with pytest.warns(DegenerateSamples):
            g = em_fit(np.ones((10, 2)), K=3, seed=0, scale=np.array([2.0, 2.0]))
        assert g.n_components == 1 and np.allclose(g.variances, 1e-10 * 4.0)

    def test_variance_floor(self, rng):
        X = np.column_stack([rng.normal(size=200), np.zeros(200)])
        g = em_fit(X, K=3, seed=0, scale=np.array([10.0, 10.0]))
        assert np.all(g.variances >= 1e-10 * 100.0 * (1 - 1e-12))

    def test_deterministic_per_seed(self, rng):
        X = rng.normal(size=(300, 2))
        a, b = em_fit(X, 4, seed=9), em_fit(X, 4, seed=9)
        assert np.array_equal(a.means, b.means)

    def test_refit_recovers_generator_likelihood(self):
        gen = GaussianMixture([0.4, 0.6], [[0.0, 0.0], [3.0, 3.0]], [[0.5, 1.0], [1.0, 0.3]])
        X = gmm_sample(gen, 100_000, 1)
        fit = em_fit(X, K=2, seed=0)
        ll_gen = gmm_logpdf(gen, X).mean()
        ll_fit = gmm_logpdf(fit, X).mean()
        assert abs(ll_fit - ll_gen) <= 0.01 * abs(ll_gen)


class TestNominal:
    def test_uniform(self):
        dom = Domain([0.0, -1.0], [2.0, 1.0])
        nom = NominalDensity(dom)
        lp = nom.logpdf(np.array([[1.0, 0.0], [3.0, 0.0]]))
        assert lp[0] == pytest.approx(-math.log(4.0)) and lp[1] == -np.inf

    def test_product_marginals(self, rng):
        dom = Domain([-10.0, -10.0], [10.0, 10.0])
        nom = NominalDensity(dom, ({"dist": "norm", "loc": 0, "scale": 1}, {"dist": "norm", "loc": 1, "scale": 2}))
        x = np.array([[0.3, -0.4]])
        ref = stats.norm.logpdf(0.3) + stats.norm.logpdf(-0.4, 1, 2)
        assert nom.logpdf(x)[0] == pytest.approx(ref)
        assert nom.sample(10, rng).shape == (10, 2)

    def test_unknown_marginal(self):
        with pytest.raises(ValueError):
            NominalDensity(Domain([0.0], [1.0]), ({"dist": "cauchy_weird"},))
