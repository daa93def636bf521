"""
Property Testing Suite
Statistical properties of the whole model at acceptance scale: collapse,
conditioning, the ELBO bound, predictive calibration and the conflict check.
Suites that draw millions of samples or fit many replicates are marked slow.
"""
import numpy as np
import pytest
from django.test import SimpleTestCase
from scipy import stats
from sklearn.metrics import adjusted_rand_score

from basis.services import design
from basis.specs import BasisSpec
from dmfa.architecture import DmfaArchitecture, validate
from dmfa.services import collapse, sample_beta
from dmfa.tests import path_oracle_log_density, random_params
from gmm.mixture import GaussianMixture, LinearObservationMap, condition, log_pdf, moments, sample
from gmm.tests import dense_joint_condition, random_mixture
from predict.plugin import PluginParams
from predict.services import cluster_assign, conflict_tail_probability
from simlab.dataset import LongitudinalDataset, SubjectRecord
from simlab.generators import gen_dgp1
from simlab.metrics import evaluate, predict_holdouts
from vi.objective import elbo, mc_elbo
from vi.services import best_candidate, fit, score_architectures
from vi.state import FitConfig


def random_architecture(rng):
    """A valid architecture with at most two layers and d <= 10."""
    while True:
        layers = int(rng.integers(1, 3))
        dims = [int(rng.integers(3 if layers == 1 else 7, 11))]
        for _ in range(layers):
            dims.append(int(rng.integers(1, (dims[-1] - 1) // 2 + 1)))
        arch = DmfaArchitecture(tuple(int(k) for k in rng.integers(1, 4, size=layers)), tuple(dims))
        if validate(arch).ok:
            return arch


def two_cluster_plugin():
    basis = BasisSpec.legendre(3, (0.0, 1.0))
    beta_prior = GaussianMixture(
        [0.4, 0.6],
        [[1.5, 0.5, 0.0], [-1.0, -0.5, 0.3]],
        [np.diag([0.2, 0.1, 0.05]), np.diag([0.1, 0.2, 0.1])],
    )
    return PluginParams(beta_prior, 0.05, basis)


def simulate_from_plugin(plugin, n_subjects, n_observed, n_holdout, seed):
    rng = np.random.default_rng(seed)
    betas = sample(plugin.beta_prior, n_subjects, seed=rng.integers(2 ** 32))
    subjects = []
    for i, beta in enumerate(betas):
        times = np.sort(rng.uniform(0.0, 1.0, n_observed + n_holdout))
        values = plugin.design(times) @ beta + rng.normal(scale=np.sqrt(plugin.sigma2), size=times.size)
        held = np.zeros(times.size, dtype=bool)
        held[rng.choice(times.size, n_holdout, replace=False)] = True
        subjects.append(SubjectRecord(f'p{i:05d}', times[~held], values[~held], times[held], values[held]))
    return LongitudinalDataset(tuple(subjects))


@pytest.mark.slow
class CollapseAcceptanceTests(SimpleTestCase):
    """Collapsed mixtures of 50 random architectures"""

    def setUp(self):
        rng = np.random.default_rng(2024)
        self.cases = [(arch, random_params(arch, rng)) for arch in
                      (random_architecture(rng) for _ in range(50))]

    def test_log_density_matches_path_enumeration(self):
        for index, (arch, params) in enumerate(self.cases):
            points = sample_beta(params, 200, seed=index)
            np.testing.assert_allclose(
                log_pdf(collapse(params), points), path_oracle_log_density(params, points),
                rtol=0, atol=1e-8, err_msg=str(arch),
            )

    def test_moments_match_ancestral_samples(self):
        count = 100_000
        for index, (arch, params) in enumerate(self.cases):
            draws = sample_beta(params, count, seed=1000 + index)
            mean, cov = moments(collapse(params))
            centred = draws - draws.mean(axis=0)
            mean_se = np.sqrt(np.diag(cov) / count)
            self.assertTrue(np.all(np.abs(draws.mean(axis=0) - mean) < 5 * mean_se), str(arch))
            products = centred[:, :, None] * centred[:, None, :]
            cov_se = products.std(axis=0) / np.sqrt(count)
            gap = np.abs(products.mean(axis=0) - cov)
            self.assertTrue(np.all(gap < 6 * cov_se + 1e-9), str(arch))


class ConditioningAcceptanceTests(SimpleTestCase):
    """condition against the dense joint-Gaussian construction"""

    def test_random_instances_match_componentwise(self):
        rng = np.random.default_rng(77)
        for _ in range(100):
            n_components, dim = int(rng.integers(1, 5)), int(rng.integers(2, 6))
            n, t = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            gmm = random_mixture(rng, n_components, dim)
            obs, pred = rng.normal(size=(n, dim)), rng.normal(size=(t, dim))
            noise = rng.uniform(0.1, 1.0)
            y = obs @ gmm.means[0] + rng.normal(size=n)
            result = condition(gmm, LinearObservationMap(obs, pred, noise), y)
            self.assertEqual(result.n_components, n_components)
            for k in range(n_components):
                expected_mean, expected_cov = dense_joint_condition(
                    gmm.means[k], gmm.covariances[k], obs, pred, noise, y)
                np.testing.assert_allclose(result.means[k], expected_mean, atol=1e-10, rtol=1e-8)
                np.testing.assert_allclose(result.covariances[k], expected_cov, atol=1e-10, rtol=1e-8)


@pytest.mark.slow
class ElboBoundTests(SimpleTestCase):
    """Tiny models: three subjects with two observations, d = 3, one layer"""

    def instances(self):
        rng = np.random.default_rng(5)
        for index in range(20):
            times = np.sort(rng.uniform(0.05, 0.95, size=2))
            yield index, LongitudinalDataset(tuple(
                SubjectRecord(f's{i}', times, rng.normal(scale=1.5, size=2)) for i in range(3)
            ))

    def test_elbo_never_exceeds_importance_weighted_bound(self):
        basis = BasisSpec.legendre(3, (0.0, 1.0))
        arch = DmfaArchitecture((1,), (3, 1))
        for index, data in self.instances():
            config = FitConfig(basis=basis, minibatch_size=3, max_iterations=20, seed=index,
                               step_scale=1.0, step_power=0.0, log_every=0)
            result = fit(data, arch, config)
            # Full-batch unit steps are coordinate ascent
            trace = result.elbo_trace
            for before, after in zip(trace, trace[1:]):
                self.assertGreaterEqual(after, before - 1e-8 * (1.0 + abs(before)))
            closed = elbo(result.state, data)
            estimate = mc_elbo(result.state, data, count=4000, seed=index)
            self.assertGreaterEqual(estimate.log_evidence, closed - 4 * estimate.std_error)


@pytest.mark.slow
class CalibrationTests(SimpleTestCase):
    """Coverage of predictives when the data come from the plug-in model itself"""

    def setUp(self):
        self.plugin = two_cluster_plugin()

    def test_pointwise_coverage_over_500_points(self):
        data = simulate_from_plugin(self.plugin, 100, 10, 5, seed=31)
        report = evaluate(predict_holdouts(self.plugin, data), n_hdr_samples=2000, seed=1)
        metrics = report.replicates[0]
        self.assertEqual(metrics.n_points, 500)
        for level, coverage in metrics.pointwise_coverage.items():
            se = np.sqrt(level * (1 - level) / 500)
            self.assertLess(abs(coverage - level), 4 * se, f'level {level}')

    def test_elliptical_coverage_follows_the_diagonal(self):
        data = simulate_from_plugin(self.plugin, 2000, 6, 5, seed=32)
        report = evaluate(predict_holdouts(self.plugin, data), n_hdr_samples=4000, seed=2)
        for level, coverage in report.replicates[0].elliptical_coverage.items():
            self.assertLess(abs(coverage - level), 0.05, f'level {level}')


@pytest.mark.slow
class ConflictCalibrationTests(SimpleTestCase):
    """Tail probabilities under a well-specified model"""

    def test_p_values_are_uniform(self):
        plugin = two_cluster_plugin()
        times = np.linspace(0.05, 0.95, 8)
        rng = np.random.default_rng(41)
        p_values = []
        for replicate in range(200):
            beta = sample(plugin.beta_prior, 1, seed=rng.integers(2 ** 32))[0]
            values = plugin.design(times) @ beta + rng.normal(scale=np.sqrt(plugin.sigma2), size=times.size)
            report = conflict_tail_probability(plugin, times, values, 4, n_prior_draws=100,
                                               n_kl_samples=1000, seed=replicate)
            p_values.append(report.p)
        self.assertGreater(stats.kstest(p_values, 'uniform').pvalue, 0.01)


@pytest.mark.slow
class ClusterRecoveryTests(SimpleTestCase):
    """Implicit clustering of the two DGP 1 groups"""

    def test_two_groups_are_recovered(self):
        data = gen_dgp1(n_subjects=200, seed=3)
        basis = BasisSpec.legendre(8, (0.0, 1.0))
        config = FitConfig(basis=basis, max_iterations=300, seed=3, log_every=0)
        plugin = fit(data, DmfaArchitecture((4,), (8, 2)), config).plugin
        assigned = [cluster_assign(plugin, s.times, s.values)[0] for s in data]
        self.assertGreaterEqual(adjusted_rand_score(data.labels, assigned), 0.8)


@pytest.mark.slow
class FitRecoveryTests(SimpleTestCase):
    """Fitted mean functions against known truths"""

    grid = np.linspace(0.0, 1.0, 41)

    def test_single_component_mean_within_two_posterior_sds(self):
        basis = BasisSpec.legendre(3, (0.0, 1.0))
        truth = np.array([0.5, -1.0, 0.4])
        rng = np.random.default_rng(17)
        effects = rng.normal(scale=0.5, size=(200, 3))
        # Centred so that the truth is also the sample mean of the subject coefficients
        effects -= effects.mean(axis=0)
        subjects = []
        for i, effect in enumerate(effects):
            times = np.sort(rng.uniform(0.0, 1.0, 12))
            values = design(basis, times) @ (truth + effect) + rng.normal(scale=0.05, size=times.size)
            subjects.append(SubjectRecord(f'm{i:05d}', times, values))
        data = LongitudinalDataset(tuple(subjects))

        config = FitConfig(basis=basis, minibatch_size=200, max_iterations=100, step_scale=1.0,
                           step_power=0.0, seed=5, log_every=0)
        result = fit(data, DmfaArchitecture((1,), (3, 1)), config)
        x = design(basis, self.grid)
        fitted = x @ moments(result.plugin.beta_prior)[0]
        mean_var = result.state.layers[0].coef_cov[0, :, 0, 0]
        sd = np.sqrt((x ** 2) @ mean_var)
        self.assertTrue(np.all(np.abs(fitted - x @ truth) <= 2 * sd))

    def test_dgp1_components_follow_both_group_means(self):
        data = gen_dgp1(n_subjects=200, seed=3)
        basis = BasisSpec.legendre(8, (0.0, 1.0))
        config = FitConfig(basis=basis, max_iterations=300, seed=3, log_every=0)
        mixture = fit(data, DmfaArchitecture((2,), (8, 2)), config).plugin.beta_prior
        self.assertGreaterEqual(mixture.n_components, 2)
        dominant = np.argsort(mixture.weights)[::-1][:2]
        curves = design(basis, self.grid) @ mixture.means[dominant].T
        target = np.sin(4 * np.pi * self.grid)
        correlations = sorted(np.corrcoef(curve, target)[0, 1] for curve in curves.T)
        self.assertLess(correlations[0], -0.95)
        self.assertGreater(correlations[1], 0.95)


@pytest.mark.slow
class SelectionReplicateTests(SimpleTestCase):
    """Short-run scores over repeated DGP 1 datasets"""

    def test_two_components_win_in_45_of_50_seeds(self):
        basis = BasisSpec.legendre(8, (0.0, 1.0))
        single, double = DmfaArchitecture((1,), (8, 2)), DmfaArchitecture((2,), (8, 2))
        wins = 0
        for seed in range(50):
            data = gen_dgp1(n_subjects=200, seed=seed)
            config = FitConfig(basis=basis, seed=seed, log_every=0)
            scores = score_architectures(data, [single, double], 100, config)
            wins += best_candidate(scores) == double
        self.assertGreaterEqual(wins, 45)
