import json

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from basis.specs import BasisSpec
from dmlmm.exceptions import ContractViolation
from gmm.mixture import GaussianMixture, cdf_scalar, moments, sample
from .plugin import MARGINAL, ConflictReport, PluginParams, PredictiveResult
from .services import (
    band_table, cdf_table, cluster_assign, conflict_tail_probability, correlation_function,
    elliptical_coverage, marginal_predictive, mixture_quantile, pointwise_band, predictive,
    scalar_marginal, threshold_risk,
)

BASIS = BasisSpec.legendre(3, (0.0, 1.0))
GRID = np.linspace(0.05, 0.95, 5)


def single_plugin(sigma2=0.1, mean=(1.0, -0.5, 0.2), scale=0.5):
    prior = GaussianMixture.single(np.array(mean), scale * np.eye(3))
    return PluginParams(prior, sigma2, BASIS)


def two_cluster_plugin(separation=10.0, sigma2=0.01):
    means = np.array([[separation, 0.0, 0.0], [-separation, 0.0, 0.0]])
    covs = np.stack([0.05 * np.eye(3)] * 2)
    return PluginParams(GaussianMixture([0.5, 0.5], means, covs), sigma2, BASIS)


def dense_oracle(plugin, t_obs, y_obs, t_grid):
    """Condition the explicit joint normal of (y, ỹ) for a one-component prior."""
    obs, pred = plugin.design(t_obs), plugin.design(t_grid)
    mean, cov = plugin.beta_prior.means[0], plugin.beta_prior.covariances[0]
    joint = np.vstack([obs, pred])
    joint_cov = joint @ cov @ joint.T + plugin.sigma2 * np.eye(joint.shape[0])
    n = obs.shape[0]
    gain = joint_cov[n:, :n] @ np.linalg.inv(joint_cov[:n, :n])
    cond_mean = pred @ mean + gain @ (y_obs - obs @ mean)
    cond_cov = joint_cov[n:, n:] - gain @ joint_cov[:n, n:]
    return cond_mean, cond_cov


class PredictiveTests(SimpleTestCase):
    def test_no_observations_equals_marginal(self):
        plugin = two_cluster_plugin()
        conditional = predictive(plugin, [], [], GRID)
        marginal = marginal_predictive(plugin, GRID)
        np.testing.assert_array_equal(conditional.mixture.weights, marginal.mixture.weights)
        np.testing.assert_array_equal(conditional.mixture.means, marginal.mixture.means)
        np.testing.assert_array_equal(conditional.mixture.covariances, marginal.mixture.covariances)
        self.assertTrue(conditional.is_marginal)

    def test_single_component_matches_dense_conditioning(self):
        plugin = single_plugin()
        t_obs = np.array([0.1, 0.4, 0.7])
        y_obs = np.array([0.9, 1.3, 0.2])
        result = predictive(plugin, t_obs, y_obs, GRID, subject_id='s1')
        mean, cov = dense_oracle(plugin, t_obs, y_obs, GRID)
        np.testing.assert_allclose(result.mixture.means[0], mean, atol=1e-10)
        np.testing.assert_allclose(result.mixture.covariances[0], cov, atol=1e-10)
        self.assertEqual(result.provenance, 's1')

    def test_dense_observations_are_reproduced(self):
        plugin = single_plugin(sigma2=1e-6, scale=4.0)
        t_obs = np.linspace(0.0, 1.0, 12)
        y_obs = 0.5 + t_obs - t_obs ** 2
        result = predictive(plugin, t_obs, y_obs, t_obs[1:-1])
        mean, cov = moments(result.mixture)
        sd = np.sqrt(np.diag(cov))
        self.assertTrue(np.all(np.abs(mean - y_obs[1:-1]) <= 3 * sd + 1e-9))

    def test_marginal_moments_follow_the_basis(self):
        plugin = two_cluster_plugin(separation=2.0, sigma2=0.3)
        result = marginal_predictive(plugin, GRID)
        design = plugin.design(GRID)
        beta_mean, beta_cov = moments(plugin.beta_prior)
        mean, cov = moments(result.mixture)
        np.testing.assert_allclose(mean, design @ beta_mean, atol=1e-12)
        np.testing.assert_allclose(cov, design @ beta_cov @ design.T + 0.3 * np.eye(GRID.size), atol=1e-10)

    def test_single_grid_point_variance(self):
        plugin = single_plugin(sigma2=0.2, scale=0.5)
        result = marginal_predictive(plugin, [0.3])
        row = plugin.design([0.3])[0]
        self.assertAlmostEqual(result.mixture.covariances[0, 0, 0], 0.5 * row @ row + 0.2, places=12)

    def test_mismatched_observation_lengths_rejected(self):
        with self.assertRaises(ContractViolation):
            predictive(single_plugin(), [0.1, 0.2], [1.0], GRID)

    def test_result_document(self):
        result = marginal_predictive(single_plugin(), GRID)
        document = json.loads(json.dumps(result.to_dict()))
        self.assertEqual(document['provenance'], MARGINAL)
        self.assertEqual(len(document['grid']), GRID.size)


class BandTests(SimpleTestCase):
    def test_single_component_band_matches_normal_quantiles(self):
        result = marginal_predictive(single_plugin(), GRID)
        lower, upper = pointwise_band(result, 0.95)
        mean, cov = moments(result.mixture)
        sd = np.sqrt(np.diag(cov))
        z = stats.norm.ppf(0.975)
        np.testing.assert_allclose(lower, mean - z * sd, atol=1e-6)
        np.testing.assert_allclose(upper, mean + z * sd, atol=1e-6)

    def test_bands_are_nested(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID)
        narrow = pointwise_band(result, 0.5)
        wide = pointwise_band(result, 0.95)
        self.assertTrue(np.all(wide[0] <= narrow[0]))
        self.assertTrue(np.all(narrow[1] <= wide[1]))

    def test_band_is_continuous_in_level(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.5, sigma2=0.2), GRID)
        lower, upper = pointwise_band(result, 0.9)
        lower_next, upper_next = pointwise_band(result, 0.9 + 1e-4)
        self.assertLess(np.max(np.abs(lower - lower_next)), 1e-2)
        self.assertLess(np.max(np.abs(upper - upper_next)), 1e-2)

    def test_quantile_of_bimodal_mixture(self):
        scalar = GaussianMixture([0.5, 0.5], [[-5.0], [5.0]], [[[1.0]], [[1.0]]])
        self.assertAlmostEqual(mixture_quantile(scalar, 0.5), 0.0, places=7)

    def test_level_outside_unit_interval_rejected(self):
        result = marginal_predictive(single_plugin(), GRID)
        with self.assertRaises(ContractViolation):
            pointwise_band(result, 1.0)

    def test_table_columns_are_ordered(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID)
        table = band_table(result, 0.95, threshold=0.0)
        self.assertEqual(list(table.columns), ['t', 'mean', 'lower', 'upper', 'risk'])
        self.assertTrue((table['lower'] <= table['mean']).all())
        self.assertTrue((table['mean'] <= table['upper']).all())


class RiskTests(SimpleTestCase):
    def test_risk_far_below_is_zero(self):
        result = marginal_predictive(single_plugin(), GRID)
        self.assertLess(threshold_risk(result, 0, -1e9), 1e-12)

    def test_risk_at_symmetric_mean_is_half(self):
        result = marginal_predictive(single_plugin(), GRID)
        self.assertAlmostEqual(threshold_risk(result, 2, result.mixture.means[0, 2]), 0.5, places=12)

    def test_risk_matches_sample_fraction(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID)
        draws = sample(scalar_marginal(result, 1), 200_000, seed=5)[:, 0]
        risk = threshold_risk(result, 1, 0.3)
        se = np.sqrt(risk * (1 - risk) / draws.size)
        self.assertLess(abs(np.mean(draws <= 0.3) - risk), 4 * se)

    def test_cdf_table_matches_scalar_marginals(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID)
        values = [-1.0, 0.0, 0.3, 2.0]
        table = cdf_table(result, values)
        self.assertEqual(list(table.columns), ['t', 'value', 'cdf'])
        self.assertEqual(len(table), GRID.size * len(values))
        for i, t in enumerate(GRID):
            rows = table[table['t'] == t]
            np.testing.assert_allclose(rows['cdf'], cdf_scalar(scalar_marginal(result, i), values), rtol=1e-14)
            self.assertTrue(np.all(np.diff(rows['cdf']) >= 0))
        self.assertAlmostEqual(float(table['cdf'].iloc[2]), threshold_risk(result, 0, 0.3), places=14)

    def test_cdf_table_needs_values(self):
        result = marginal_predictive(single_plugin(), GRID)
        with self.assertRaises(ContractViolation):
            cdf_table(result, [])

    def test_bad_grid_index_rejected(self):
        result = marginal_predictive(single_plugin(), GRID)
        with self.assertRaises(ContractViolation):
            threshold_risk(result, GRID.size, 0.0)

    def test_correlation_has_unit_diagonal(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID)
        variance, correlation = correlation_function(result)
        np.testing.assert_allclose(np.diag(correlation), 1.0)
        self.assertTrue(np.all(variance > 0.2))


class ClusterAssignTests(SimpleTestCase):
    def test_single_component(self):
        index, weights = cluster_assign(single_plugin(), [0.2, 0.6], [1.0, 0.5])
        self.assertEqual(index, 0)
        np.testing.assert_array_equal(weights, [1.0])

    def test_separated_component_is_recovered(self):
        plugin = two_cluster_plugin()
        times = np.linspace(0.1, 0.9, 6)
        values = plugin.design(times) @ plugin.beta_prior.means[1]
        index, weights = cluster_assign(plugin, times, values)
        self.assertEqual(index, 1)
        self.assertGreater(weights[1], 0.99)
        self.assertAlmostEqual(weights.sum(), 1.0, places=12)

    def test_weights_equal_predictive_weights(self):
        plugin = two_cluster_plugin(separation=0.5, sigma2=0.3)
        times, values = np.array([0.2, 0.5]), np.array([0.4, -0.1])
        _, weights = cluster_assign(plugin, times, values)
        result = predictive(plugin, times, values, GRID)
        np.testing.assert_allclose(weights, result.tilde_weights, atol=1e-12)

    def test_needs_an_observation(self):
        with self.assertRaises(ContractViolation):
            cluster_assign(single_plugin(), [], [])


class EllipticalCoverageTests(SimpleTestCase):
    def test_mode_is_always_covered(self):
        result = marginal_predictive(single_plugin(), GRID[:2])
        self.assertTrue(elliptical_coverage(result, result.mixture.means[0], 0.05, n_samples=20_000))

    def test_single_component_agrees_with_chi_square(self):
        result = marginal_predictive(single_plugin(), GRID[:2])
        mean, cov = result.mixture.means[0], result.mixture.covariances[0]
        precision = np.linalg.inv(cov)
        limit = stats.chi2.ppf(0.9, df=2)
        rng = np.random.default_rng(11)
        points = rng.multivariate_normal(mean, 2.0 * cov, size=200)
        agree = 0
        for point in points:
            expected = (point - mean) @ precision @ (point - mean) <= limit
            agree += elliptical_coverage(result, point, 0.9, n_samples=100_000, seed=3) == expected
        self.assertGreaterEqual(agree, 198)

    def test_self_calibration(self):
        result = marginal_predictive(two_cluster_plugin(separation=1.0, sigma2=0.2), GRID[:3])
        truths = sample(result.mixture, 400, seed=21)
        covered = np.mean([elliptical_coverage(result, y, 0.5, n_samples=20_000, seed=4) for y in truths])
        self.assertLess(abs(covered - 0.5), 4 * np.sqrt(0.25 / 400))

    def test_wrong_dimension_rejected(self):
        result = marginal_predictive(single_plugin(), GRID)
        with self.assertRaises(ContractViolation):
            elliptical_coverage(result, np.zeros(2), 0.5)


class ConflictTests(SimpleTestCase):
    times = np.linspace(0.0, 1.0, 8)

    def test_shifted_series_is_surprising(self):
        plugin = single_plugin()
        marginal = marginal_predictive(plugin, self.times).mixture
        mean, cov = moments(marginal)
        shifted = mean + 10 * np.sqrt(np.diag(cov))
        report = conflict_tail_probability(plugin, self.times, shifted, 4, n_prior_draws=100,
                                           n_kl_samples=1000, seed=1)
        self.assertIsInstance(report, ConflictReport)
        self.assertLess(report.p, 0.01)
        self.assertGreater(report.G_observed, 0.0)

    def test_typical_series_is_not_surprising(self):
        plugin = single_plugin()
        series = plugin.design(self.times) @ plugin.beta_prior.means[0]
        report = conflict_tail_probability(plugin, self.times, series, 4, n_prior_draws=100,
                                           n_kl_samples=1000, seed=1)
        self.assertGreater(report.p, 0.5)

    def test_is_deterministic_under_seed(self):
        plugin = two_cluster_plugin(separation=0.5, sigma2=0.3)
        series = np.linspace(-0.5, 0.5, self.times.size)
        first = conflict_tail_probability(plugin, self.times, series, 3, 100, 1000, seed=9)
        second = conflict_tail_probability(plugin, self.times, series, 3, 100, 1000, seed=9)
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_split_and_draw_preconditions(self):
        plugin = single_plugin()
        series = np.zeros(self.times.size)
        with self.assertRaises(ContractViolation):
            conflict_tail_probability(plugin, self.times, series, 0, 100)
        with self.assertRaises(ContractViolation):
            conflict_tail_probability(plugin, self.times, series, self.times.size, 100)
        with self.assertRaises(ContractViolation):
            conflict_tail_probability(plugin, self.times, series, 3, 99)


class PluginDocumentTests(SimpleTestCase):
    def test_round_trip(self):
        plugin = two_cluster_plugin(separation=1.0, sigma2=0.25)
        restored = PluginParams.from_dict(json.loads(json.dumps(plugin.to_dict())))
        np.testing.assert_array_equal(restored.beta_prior.means, plugin.beta_prior.means)
        self.assertEqual(restored.sigma2, 0.25)

    def test_dimension_mismatch_rejected(self):
        with self.assertRaises(ContractViolation):
            PluginParams(GaussianMixture.single(np.zeros(2), np.eye(2)), 0.1, BASIS)

    def test_grid_must_increase(self):
        mixture = GaussianMixture.single(np.zeros(2), np.eye(2))
        with self.assertRaises(ContractViolation):
            PredictiveResult(mixture, [0.5, 0.2])
