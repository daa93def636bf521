import json

import numpy as np
from django.test import SimpleTestCase
from scipy import integrate, stats

from dmlmm.exceptions import ContractViolation, NumericalFailure
from .linalg import stable_cholesky
from .mixture import (
    GaussianMixture, LinearObservationMap, cdf_scalar, condition, kl_mc,
    log_pdf, moments, posterior, renormalize, sample,
)


def random_spd(rng, dim, scale=1.0):
    factor = rng.normal(size=(dim, dim))
    return scale * (factor @ factor.T / dim + 0.2 * np.eye(dim))


def random_mixture(rng, n_components, dim):
    weights = rng.dirichlet(np.ones(n_components) * 2.0)
    means = rng.normal(scale=2.0, size=(n_components, dim))
    covs = np.stack([random_spd(rng, dim) for _ in range(n_components)])
    return GaussianMixture(weights, means, covs)


def dense_joint_condition(mean, cov, obs, pred, noise, y):
    """Condition the explicit (n+T)-dimensional joint normal."""
    n, t = obs.shape[0], pred.shape[0]
    joint_design = np.vstack([obs, pred])
    joint_mean = joint_design @ mean
    joint_cov = joint_design @ cov @ joint_design.T + noise * np.eye(n + t)
    s_oo = joint_cov[:n, :n]
    s_po = joint_cov[n:, :n]
    s_pp = joint_cov[n:, n:]
    cond_mean = joint_mean[n:] + s_po @ np.linalg.solve(s_oo, y - joint_mean[:n])
    cond_cov = s_pp - s_po @ np.linalg.solve(s_oo, s_po.T)
    return cond_mean, cond_cov


class TypeInvariantTests(SimpleTestCase):
    def test_rejects_weights_not_summing_to_one(self):
        with self.assertRaises(ContractViolation):
            GaussianMixture([0.5, 0.4], np.zeros((2, 1)), np.ones((2, 1, 1)))

    def test_rejects_asymmetric_covariance(self):
        with self.assertRaises(ContractViolation):
            GaussianMixture.single(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])

    def test_rejects_indefinite_covariance(self):
        with self.assertRaises(NumericalFailure):
            GaussianMixture.single(np.zeros(2), [[1.0, 0.0], [0.0, -1.0]])

    def test_json_document_round_trips_exactly(self):
        gmm = random_mixture(np.random.default_rng(3), 3, 2)
        text = json.dumps(gmm.to_dict())
        restored = GaussianMixture.from_dict(json.loads(text))
        np.testing.assert_array_equal(restored.weights, gmm.weights)
        np.testing.assert_array_equal(restored.means, gmm.means)
        np.testing.assert_array_equal(restored.covariances, gmm.covariances)


class LogPdfTests(SimpleTestCase):
    def test_standard_normal_at_mode(self):
        gmm = GaussianMixture.single(np.zeros(2), np.eye(2))
        self.assertAlmostEqual(log_pdf(gmm, np.zeros(2)), -np.log(2 * np.pi), places=11)

    def test_zero_weight_component_is_ignored(self):
        gmm = GaussianMixture([1.0, 0.0], [[0.0], [5.0]], [[[1.0]], [[2.0]]])
        alone = GaussianMixture.single([0.0], [[1.0]])
        for x in (-3.0, 0.1, 4.0):
            self.assertAlmostEqual(log_pdf(gmm, [x]), log_pdf(alone, [x]), places=12)

    def test_two_component_scalar_summation(self):
        gmm = GaussianMixture([0.5, 0.5], [[-1.0], [1.0]], [[[1.0]], [[1.0]]])
        expected = np.log(0.5 * stats.norm.pdf(0.0, -1.0, 1.0) + 0.5 * stats.norm.pdf(0.0, 1.0, 1.0))
        self.assertAlmostEqual(log_pdf(gmm, [0.0]), expected, places=12)

    def test_density_integrates_to_one(self):
        gmm = GaussianMixture([0.3, 0.7], [[0.0], [2.0]], [[[1.0]], [[0.25]]])
        total, _ = integrate.quad(lambda x: np.exp(log_pdf(gmm, [x])), -np.inf, np.inf)
        self.assertAlmostEqual(total, 1.0, delta=1e-4)

    def test_dimension_mismatch_is_a_contract_violation(self):
        gmm = GaussianMixture.single(np.zeros(2), np.eye(2))
        with self.assertRaises(ContractViolation):
            log_pdf(gmm, np.zeros(3))

    def test_long_observation_vectors_do_not_underflow(self):
        dim = 300
        gmm = GaussianMixture([0.5, 0.5], np.stack([np.zeros(dim), np.ones(dim)]),
                              np.stack([np.eye(dim), np.eye(dim)]))
        value = log_pdf(gmm, np.full(dim, 10.0))
        self.assertTrue(np.isfinite(value))


class CdfTests(SimpleTestCase):
    def test_standard_normal_symmetry(self):
        gmm = GaussianMixture.single([0.0], [[1.0]])
        self.assertAlmostEqual(cdf_scalar(gmm, 0.0), 0.5, places=14)

    def test_upper_tail_limit(self):
        gmm = GaussianMixture([0.2, 0.8], [[-1.0], [3.0]], [[[4.0]], [[1.0]]])
        x = 10 * (3.0 + 2.0)
        self.assertGreater(cdf_scalar(gmm, x), 1 - 1e-6)

    def test_matches_quadrature(self):
        gmm = GaussianMixture([0.3, 0.7], [[0.0], [2.0]], [[[1.0]], [[1.0]]])
        expected, _ = integrate.quad(lambda x: np.exp(log_pdf(gmm, [x])), -np.inf, 1.0)
        self.assertAlmostEqual(cdf_scalar(gmm, 1.0), expected, places=8)

    def test_monotone_on_random_grid(self):
        rng = np.random.default_rng(11)
        gmm = random_mixture(rng, 3, 1)
        grid = np.sort(rng.uniform(-10, 10, size=500))
        values = cdf_scalar(gmm, grid)
        self.assertTrue(np.all(np.diff(values) >= 0))

    def test_multivariate_mixture_is_rejected(self):
        with self.assertRaises(ContractViolation):
            cdf_scalar(GaussianMixture.single(np.zeros(2), np.eye(2)), 0.0)


class MomentTests(SimpleTestCase):
    def test_single_component(self):
        gmm = GaussianMixture.single([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
        mean, cov = moments(gmm)
        np.testing.assert_allclose(mean, [1.0, 2.0])
        np.testing.assert_allclose(cov, [[2.0, 0.3], [0.3, 1.0]])

    def test_symmetric_pair_law_of_total_variance(self):
        a = np.array([1.0, -2.0])
        gmm = GaussianMixture([0.5, 0.5], np.stack([-a, a]), np.stack([np.eye(2), np.eye(2)]))
        mean, cov = moments(gmm)
        np.testing.assert_allclose(mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(cov, np.eye(2) + np.outer(a, a))

    def test_matches_sample_moments(self):
        gmm = random_mixture(np.random.default_rng(5), 3, 2)
        count = 10 ** 6
        draws = sample(gmm, count, seed=9)
        mean, cov = moments(gmm)
        se = np.sqrt(np.diag(cov) / count)
        self.assertTrue(np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se))
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.02, atol=0.02)


class ConditionTests(SimpleTestCase):
    def test_single_component_matches_dense_joint_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            dim = rng.integers(2, 7)
            n, t = rng.integers(1, 9), rng.integers(1, 9)
            mean = rng.normal(size=dim)
            cov = random_spd(rng, dim)
            obs, pred = rng.normal(size=(n, dim)), rng.normal(size=(t, dim))
            noise = rng.uniform(0.05, 1.0)
            y = rng.normal(size=n)
            result = condition(GaussianMixture.single(mean, cov),
                               LinearObservationMap(obs, pred, noise), y)
            expected_mean, expected_cov = dense_joint_condition(mean, cov, obs, pred, noise, y)
            np.testing.assert_allclose(result.means[0], expected_mean, atol=1e-10, rtol=1e-8)
            np.testing.assert_allclose(result.covariances[0], expected_cov, atol=1e-10, rtol=1e-8)

    def test_components_match_oracle_and_weights_use_noise(self):
        rng = np.random.default_rng(22)
        gmm = random_mixture(rng, 4, 5)
        obs, pred = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
        noise, y = 0.3, rng.normal(size=6)
        result = condition(gmm, LinearObservationMap(obs, pred, noise), y)
        evidence = np.array([
            gmm.weights[k] * stats.multivariate_normal.pdf(
                y, obs @ gmm.means[k], obs @ gmm.covariances[k] @ obs.T + noise * np.eye(6))
            for k in range(4)
        ])
        np.testing.assert_allclose(result.weights, evidence / evidence.sum(), rtol=1e-8)
        for k in range(4):
            expected_mean, expected_cov = dense_joint_condition(
                gmm.means[k], gmm.covariances[k], obs, pred, noise, y)
            np.testing.assert_allclose(result.means[k], expected_mean, atol=1e-10, rtol=1e-8)
            np.testing.assert_allclose(result.covariances[k], expected_cov, atol=1e-10, rtol=1e-8)

    def test_disjoint_support_only_changes_weights(self):
        means = np.array([[1.0, 0.0, 2.0, 0.0], [-1.0, 0.0, -2.0, 0.0]])
        covs = np.stack([np.diag([1.0, 1.0, 2.0, 2.0]), np.diag([0.5, 0.5, 1.0, 1.0])])
        gmm = GaussianMixture([0.4, 0.6], means, covs)
        obs = np.array([[1.0, 1.0, 0.0, 0.0]])
        pred = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        result = condition(gmm, LinearObservationMap(obs, pred, 0.1), [3.0])
        np.testing.assert_allclose(result.means, means @ pred.T)
        self.assertFalse(np.allclose(result.weights, gmm.weights))

    def test_predictive_mean_matches_weighted_joint_samples(self):
        rng = np.random.default_rng(23)
        gmm = random_mixture(rng, 3, 4)
        obs, pred = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
        noise = 0.5
        y = obs @ gmm.means[1] + rng.normal(scale=0.5, size=5)
        result = condition(gmm, LinearObservationMap(obs, pred, noise), y)
        self.assertAlmostEqual(result.weights.sum(), 1.0, places=12)
        for cov in result.covariances:
            self.assertGreaterEqual(np.linalg.eigvalsh(cov).min(), 0.0)

        count = 10 ** 6
        beta = sample(gmm, count, seed=4)
        log_lik = stats.multivariate_normal.logpdf(y - beta @ obs.T, np.zeros(5), noise * np.eye(5))
        w = np.exp(log_lik - log_lik.max())
        w /= w.sum()
        values = beta @ pred.T
        estimate = w @ values
        se = np.sqrt((w ** 2) @ (values - estimate) ** 2)
        mean, _ = moments(result)
        self.assertTrue(np.all(np.abs(mean - estimate) < 4 * se))

    def test_sequential_conditioning_equals_joint(self):
        rng = np.random.default_rng(24)
        gmm = random_mixture(rng, 3, 4)
        obs = rng.normal(size=(6, 4))
        pred = rng.normal(size=(2, 4))
        y = rng.normal(size=6)
        joint = condition(gmm, LinearObservationMap(obs, pred, 0.2), y)
        first = posterior(gmm, obs[:3], 0.2, y[:3])
        sequential = condition(first, LinearObservationMap(obs[3:], pred, 0.2), y[3:])
        np.testing.assert_allclose(sequential.weights, joint.weights, atol=1e-8)
        np.testing.assert_allclose(sequential.means, joint.means, atol=1e-8)
        np.testing.assert_allclose(sequential.covariances, joint.covariances, atol=1e-8)

    def test_empty_observation_set_keeps_weights(self):
        gmm = random_mixture(np.random.default_rng(25), 2, 3)
        pred = np.eye(3)
        result = condition(gmm, LinearObservationMap(np.zeros((0, 3)), pred, 0.1), [])
        np.testing.assert_array_equal(result.weights, gmm.weights)
        np.testing.assert_allclose(result.covariances, gmm.covariances + 0.1 * np.eye(3))


class SampleTests(SimpleTestCase):
    def test_point_mass_is_repaired_by_jitter(self):
        gmm = GaussianMixture.single([2.0, -1.0], np.zeros((2, 2)))
        count = 1000
        draws = sample(gmm, count, seed=0)
        self.assertTrue(np.all(np.abs(draws.mean(axis=0) - [2.0, -1.0]) < 5 / np.sqrt(count)))

    def test_seed_determinism(self):
        gmm = random_mixture(np.random.default_rng(1), 3, 2)
        np.testing.assert_array_equal(sample(gmm, 500, seed=42), sample(gmm, 500, seed=42))

    def test_component_frequencies_match_weights(self):
        gmm = GaussianMixture([0.2, 0.3, 0.5], [[-50.0], [0.0], [50.0]],
                              [[[1.0]], [[1.0]], [[1.0]]])
        count = 20000
        draws = sample(gmm, count, seed=3)[:, 0]
        freqs = [np.mean(draws < -25), np.mean(np.abs(draws) < 25), np.mean(draws > 25)]
        for freq, w in zip(freqs, gmm.weights):
            self.assertLess(abs(freq - w), 4 * np.sqrt(w * (1 - w) / count))


class KLTests(SimpleTestCase):
    def test_identical_mixtures(self):
        gmm = random_mixture(np.random.default_rng(8), 2, 2)
        estimate = kl_mc(gmm, gmm, 2000, seed=1)
        self.assertLessEqual(abs(estimate.value), 3 * estimate.std_error + 1e-12)

    def test_single_gaussians_match_closed_form(self):
        rng = np.random.default_rng(9)
        m0, m1 = rng.normal(size=3), rng.normal(size=3)
        s0, s1 = random_spd(rng, 3), random_spd(rng, 3)
        inv1 = np.linalg.inv(s1)
        closed = 0.5 * (np.trace(inv1 @ s0) + (m1 - m0) @ inv1 @ (m1 - m0) - 3
                        + np.log(np.linalg.det(s1) / np.linalg.det(s0)))
        estimate = kl_mc(GaussianMixture.single(m0, s0), GaussianMixture.single(m1, s1), 20000, seed=2)
        self.assertLess(abs(estimate.value - closed), 4 * estimate.std_error)

    def test_shifted_mean_dominates(self):
        p = GaussianMixture.single([10.0], [[1.0]])
        q = GaussianMixture.single([0.0], [[1.0]])
        self.assertGreater(kl_mc(p, q, 1000, seed=0).value, 10)

    def test_underflow_is_clamped_and_flagged(self):
        p = GaussianMixture.single([1e4], [[1.0]])
        q = GaussianMixture.single([0.0], [[1e-4]])
        estimate = kl_mc(p, q, 1000, seed=0, log_floor=-700.0)
        self.assertTrue(estimate.was_floored)
        self.assertTrue(np.isfinite(estimate.value))

    def test_too_few_samples(self):
        gmm = GaussianMixture.single([0.0], [[1.0]])
        with self.assertRaises(ContractViolation):
            kl_mc(gmm, gmm, 999, seed=0)


class RenormalizeTests(SimpleTestCase):
    def test_keep_all_is_identity(self):
        gmm = random_mixture(np.random.default_rng(2), 3, 2)
        result = renormalize(gmm, [True, True, True])
        np.testing.assert_allclose(result.weights, gmm.weights, rtol=1e-15)

    def test_dropping_a_component_rescales(self):
        gmm = GaussianMixture([0.25, 0.75], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
        result = renormalize(gmm, [True, False])
        np.testing.assert_array_equal(result.weights, [1.0])

    def test_density_identity_on_grid(self):
        gmm = random_mixture(np.random.default_rng(6), 4, 1)
        keep = np.array([True, False, True, True])
        result = renormalize(gmm, keep)
        grid = np.linspace(-6, 6, 41)[:, np.newaxis]
        restricted = sum(
            gmm.weights[k] * stats.norm.pdf(grid[:, 0], gmm.means[k, 0], np.sqrt(gmm.covariances[k, 0, 0]))
            for k in np.flatnonzero(keep)
        ) / gmm.weights[keep].sum()
        np.testing.assert_allclose(np.exp(log_pdf(result, grid)), restricted, rtol=1e-10)

    def test_preserves_weight_ratios(self):
        gmm = GaussianMixture([0.1, 0.2, 0.7], np.zeros((3, 1)), np.ones((3, 1, 1)))
        result = renormalize(gmm, [False, True, True])
        self.assertAlmostEqual(result.weights[1] / result.weights[0], 3.5, places=14)

    def test_all_false_mask(self):
        gmm = GaussianMixture.single([0.0], [[1.0]])
        with self.assertRaises(ContractViolation):
            renormalize(gmm, [False])


class CholeskyTests(SimpleTestCase):
    def test_near_singular_matrix_is_repaired(self):
        vec = np.array([1.0, 2.0, 3.0])
        factor = stable_cholesky(np.outer(vec, vec), label='rank one')
        self.assertEqual(factor.shape, (3, 3))

    def test_failure_names_the_label(self):
        with self.assertRaises(NumericalFailure) as ctx:
            stable_cholesky(np.diag([1.0, -5.0]), label='component 3')
        self.assertEqual(ctx.exception.label, 'component 3')
