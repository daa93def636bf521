import json
from unittest import mock

import numpy as np
from django.test import SimpleTestCase
from scipy import special, stats
from sklearn.metrics import adjusted_rand_score

from basis.services import design
from basis.specs import BasisSpec
from dmfa.architecture import DmfaArchitecture
from dmfa.services import collapse
from dmlmm.exceptions import ContractViolation, NumericalFailure
from gmm.mixture import log_pdf
from simlab.dataset import LongitudinalDataset, SubjectRecord
from .factors import InverseGamma, cauchy_variance_prior, dirichlet_elbo_term, gaussian_entropy
from .global_step import step_global
from .initialization import cluster, init_state, lower_loadings
from .local import local_terms, optimize_local, path_logits, softmax, sweep
from .objective import elbo, global_terms, mc_elbo
from .services import (
    fit, minibatch_indices, plugin_dmfa, prune_and_plugin, score_architectures, select_architecture,
)
from .state import FitConfig, SubjectDesigns, VariationalState

BASIS = BasisSpec.legendre(3, (0.0, 1.0))
TINY = DmfaArchitecture((1,), (3, 1))


def tiny_dataset():
    """Three subjects with two observations each."""
    times = np.array([0.2, 0.8])
    values = [[0.3, 1.1], [-0.4, 0.2], [1.5, 2.4]]
    return LongitudinalDataset(tuple(
        SubjectRecord(f's{i}', times, y) for i, y in enumerate(values)
    ))


def clustered_dataset(centres, per_cluster=15, seed=0, spread=0.3, noise=0.05, n_obs=8):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.05, 0.95, n_obs)
    x = design(BASIS, times)
    subjects = []
    for label, centre in enumerate(centres):
        for _ in range(per_cluster):
            beta = np.asarray(centre) + spread * rng.standard_normal(3)
            values = x @ beta + noise * rng.standard_normal(n_obs)
            subjects.append(SubjectRecord(f'c{label}-{len(subjects)}', times, values, label=label))
    return LongitudinalDataset(tuple(subjects))


TWO_CLUSTERS = [(4.0, 0.0, 0.0), (-4.0, 0.0, 0.0)]
THREE_CLUSTERS = [(4.0, 0.0, 0.0), (-2.0, 3.5, 0.0), (-2.0, -3.5, 0.0)]


def make_config(**overrides):
    options = dict(basis=BASIS, seed=3, log_every=0)
    options.update(overrides)
    return FitConfig(**options)


class FactorTests(SimpleTestCase):
    def test_inverse_gamma_moments_match_scipy(self):
        factor = InverseGamma(3.5, 2.0)
        law = stats.invgamma(3.5, scale=2.0)
        self.assertAlmostEqual(float(factor.mean), law.mean(), places=12)
        self.assertAlmostEqual(float(factor.inv_mean), 3.5 / 2.0, places=12)
        self.assertAlmostEqual(float(factor.entropy()), float(law.entropy()), places=10)
        self.assertAlmostEqual(float(factor.log_mean), law.expect(np.log), places=6)

    def test_log_density_matches_scipy(self):
        factor = InverseGamma([1.0, 4.0], [0.5, 3.0])
        x = np.array([0.7, 2.2])
        expected = stats.invgamma.logpdf(x, [1.0, 4.0], scale=[0.5, 3.0])
        np.testing.assert_allclose(factor.log_density(x), expected, rtol=1e-12)

    def test_from_mean(self):
        factor = InverseGamma.from_mean([0.5, 2.0], shape=4.0)
        np.testing.assert_allclose(factor.mean, [0.5, 2.0], rtol=1e-14)

    def test_blend_endpoints(self):
        factor = InverseGamma(2.0, 3.0)
        factor.blend(5.0, 7.0, 0.0)
        self.assertEqual((float(factor.shape), float(factor.rate)), (2.0, 3.0))
        factor.blend(5.0, 7.0, 1.0)
        self.assertEqual((float(factor.shape), float(factor.rate)), (5.0, 7.0))

    def test_gaussian_entropy_identity(self):
        variances = np.array([0.3, 1.7, 4.0])
        expected = stats.multivariate_normal(np.zeros(3), np.diag(variances)).entropy()
        self.assertAlmostEqual(gaussian_entropy(variances), float(expected), places=12)

    def test_doubling_variances_adds_half_log_two_per_dimension(self):
        variances = np.array([0.2, 0.9, 3.0])
        gain = gaussian_entropy(2.0 * variances) - gaussian_entropy(variances)
        self.assertAlmostEqual(gain, 1.5 * np.log(2.0), places=12)

    def test_dirichlet_term_vanishes_at_prior(self):
        alpha = np.array([0.5, 2.0, 3.0])
        self.assertAlmostEqual(dirichlet_elbo_term(alpha, alpha), 0.0, places=12)
        self.assertLess(dirichlet_elbo_term(alpha, alpha + 10.0), 0.0)

    def test_cauchy_variance_prior_mixes_to_cauchy(self):
        scale, count = 2.0, 20_000
        prior = cauchy_variance_prior(scale)
        self.assertEqual((float(prior.shape), float(prior.rate)), (0.5, 2.0))
        rng = np.random.default_rng(11)
        variances = stats.invgamma.rvs(prior.shape, scale=prior.rate, size=count, random_state=rng)
        means = np.sqrt(variances) * rng.standard_normal(count)
        self.assertGreater(stats.kstest(means, stats.cauchy(scale=scale).cdf).pvalue, 0.01)
        # Mass near zero separates Cauchy from the horseshoe marginal
        near_zero = np.mean(np.abs(means) < 0.1 * scale)
        expected = 2.0 / np.pi * np.arctan(0.1)
        self.assertLess(abs(near_zero - expected), 5 * np.sqrt(expected * (1 - expected) / count))


class FitConfigTests(SimpleTestCase):
    def test_step_size_schedule(self):
        config = make_config()
        self.assertAlmostEqual(config.step_size(0), 10.0 ** -0.75, places=12)
        steps = [config.step_size(m) for m in range(200)]
        self.assertTrue(all(a >= b for a, b in zip(steps, steps[1:])))
        self.assertEqual(make_config(step_scale=100.0).step_size(0), 1.0)

    def test_minibatch_larger_than_dataset(self):
        with self.assertRaises(ContractViolation):
            make_config(minibatch_size=5).batch_size(3)
        self.assertEqual(make_config().batch_size(3), 3)

    def test_invalid_options(self):
        with self.assertRaises(ContractViolation):
            make_config(prune_threshold=1.5)
        with self.assertRaises(ContractViolation):
            make_config(threads=0)

    def test_minibatches_are_reproducible_per_iteration(self):
        first = minibatch_indices(50, 10, seed=4, iteration=7)
        np.testing.assert_array_equal(first, minibatch_indices(50, 10, seed=4, iteration=7))
        self.assertEqual(len(set(first)), 10)
        self.assertFalse(np.array_equal(first, minibatch_indices(50, 10, seed=4, iteration=8)))


class InitializationTests(SimpleTestCase):
    def test_single_subject_starts_at_ridge_estimate(self):
        data = tiny_dataset().subset([0])
        config = make_config(ridge=0.25)
        state = init_state(data, TINY, config)
        x = design(BASIS, data[0].times)
        expected = np.linalg.solve(x.T @ x + 0.25 * np.eye(3), x.T @ data[0].values)
        np.testing.assert_allclose(state.beta_mean[0], expected, rtol=1e-12)
        np.testing.assert_allclose(state.resp, 1.0)

    def test_identical_subjects_duplicate_centroids(self):
        times = np.array([0.1, 0.5, 0.9])
        data = LongitudinalDataset(tuple(
            SubjectRecord(f's{i}', times, [1.0, 2.0, 0.5]) for i in range(5)
        ))
        state = init_state(data, DmfaArchitecture((2,), (3, 1)), make_config())
        self.assertTrue(np.all(np.isfinite(state.layers[0].coef_mean)))
        self.assertTrue(np.isfinite(elbo(state, data)))

    def test_cluster_handles_fewer_points_than_clusters(self):
        labels, centroids = cluster(np.array([[0.0, 1.0], [2.0, 3.0]]), 3, seed=0)
        self.assertEqual(centroids.shape, (3, 2))
        self.assertEqual(sorted(set(labels)), [0, 1])

    def test_lower_loadings_are_lower_triangular(self):
        rng = np.random.default_rng(5)
        residuals = rng.standard_normal((30, 5)) @ rng.standard_normal((5, 5))
        loadings = lower_loadings(residuals, 2)
        self.assertEqual(loadings.shape, (5, 2))
        self.assertEqual(loadings[0, 1], 0.0)
        # rotation leaves the implied covariance unchanged
        _, singular, vt = np.linalg.svd(residuals, full_matrices=False)
        scaled = vt[:2].T * singular[:2] / np.sqrt(30)
        np.testing.assert_allclose(loadings @ loadings.T, scaled @ scaled.T, atol=1e-10)

    def test_one_sweep_recovers_separated_clusters(self):
        data = clustered_dataset(TWO_CLUSTERS, per_cluster=20)
        config = make_config(local_max_sweeps=1)
        state = init_state(data, DmfaArchitecture((2,), (3, 1)), config)
        optimize_local(state, data, np.arange(len(data)), config)
        score = adjusted_rand_score(data.labels, state.resp.argmax(axis=1))
        self.assertGreaterEqual(score, 0.9)

    def test_architecture_must_match_basis(self):
        with self.assertRaises(ContractViolation):
            init_state(tiny_dataset(), DmfaArchitecture((1,), (5, 2)), make_config())

    def test_subject_without_observations(self):
        data = LongitudinalDataset((SubjectRecord('a', [0.5], [1.0]), SubjectRecord('b', [], [])))
        with self.assertRaises(ContractViolation):
            init_state(data, TINY, make_config())


class LocalStepTests(SimpleTestCase):
    def setUp(self):
        self.data = tiny_dataset()
        self.config = make_config()
        self.designs = SubjectDesigns.build(self.data, BASIS)
        self.state = init_state(self.designs, TINY, self.config)

    def test_sweeps_never_decrease_local_terms(self):
        indices = np.arange(3)
        previous = local_terms(self.state, self.designs, indices)
        for _ in range(20):
            sweep(self.state, self.designs, indices)
            current = local_terms(self.state, self.designs, indices)
            self.assertTrue(np.all(current >= previous - 1e-9 * (1.0 + np.abs(previous))))
            previous = current

    def test_fixed_point_is_stable(self):
        designs = SubjectDesigns.build(clustered_dataset(TWO_CLUSTERS, per_cluster=3), BASIS)
        state = init_state(designs, TINY, self.config)
        indices = np.arange(designs.n_subjects)
        for _ in range(300):
            sweep(state, designs, indices)
        before = [m.copy() for m in state.latent_mean]
        sweep(state, designs, indices)
        for old, new in zip(before, state.latent_mean):
            np.testing.assert_allclose(new, old, atol=1e-10, rtol=0)

    def test_responsibilities_stay_normalized_and_variances_floored(self):
        optimize_local(self.state, self.designs, np.arange(3), self.config)
        np.testing.assert_allclose(self.state.resp.sum(axis=1), 1.0, atol=1e-12)
        for var in self.state.latent_var:
            self.assertTrue(np.all(var >= 1e-10))

    def test_global_factors_are_frozen(self):
        coef = self.state.layers[0].coef_mean.copy()
        sigma_rate = float(self.state.sigma2.rate)
        optimize_local(self.state, self.designs, [0, 2], self.config)
        np.testing.assert_array_equal(self.state.layers[0].coef_mean, coef)
        self.assertEqual(float(self.state.sigma2.rate), sigma_rate)

    def test_only_indexed_subjects_change(self):
        untouched = self.state.beta_mean[1].copy()
        optimize_local(self.state, self.designs, [0, 2], self.config)
        np.testing.assert_array_equal(self.state.beta_mean[1], untouched)

    def test_path_logits_are_lexicographic(self):
        first = np.array([[0.1, 0.7]])
        second = np.array([[1.0, 2.0, 3.0]])
        logits = path_logits([first, second])
        for i in range(2):
            for j in range(3):
                self.assertAlmostEqual(logits[0, 3 * i + j], first[0, i] + second[0, j])

    def test_softmax_saturates_without_nan(self):
        resp = softmax(np.array([[0.0, -1e5, -2e5], [-1e6, 0.0, -1e6]]))
        self.assertTrue(np.all(np.isfinite(resp)))
        np.testing.assert_array_equal(resp, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_threads_match_serial_result(self):
        data = clustered_dataset(TWO_CLUSTERS, per_cluster=20, seed=2)
        serial_config = make_config()
        threaded_config = make_config(threads=4)
        serial = init_state(data, DmfaArchitecture((2,), (3, 1)), serial_config)
        threaded = serial.copy()
        optimize_local(serial, data, np.arange(len(data)), serial_config)
        optimize_local(threaded, data, np.arange(len(data)), threaded_config)
        for a, b in zip(serial.latent_mean, threaded.latent_mean):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(serial.resp, threaded.resp, rtol=1e-10, atol=1e-12)


class GlobalStepTests(SimpleTestCase):
    def setUp(self):
        self.data = tiny_dataset()
        self.config = make_config()
        self.designs = SubjectDesigns.build(self.data, BASIS)
        self.state = init_state(self.designs, TINY, self.config)
        optimize_local(self.state, self.designs, np.arange(3), self.config)

    def test_zero_step_leaves_state_unchanged(self):
        before = self.state.copy()
        step_global(self.state, self.designs, [0, 1], self.config, iteration=0, step=0.0)
        self.assertEqual(self.state.to_dict(), before.to_dict())

    def test_full_batch_unit_steps_are_monotone(self):
        indices = np.arange(3)
        values = [elbo(self.state, self.designs)]
        for iteration in range(15):
            step_global(self.state, self.designs, indices, self.config, iteration, step=1.0)
            values.append(elbo(self.state, self.designs))
            optimize_local(self.state, self.designs, indices, self.config)
            values.append(elbo(self.state, self.designs))
        for before, after in zip(values, values[1:]):
            self.assertGreaterEqual(after, before - 1e-7 * (1.0 + abs(before)))

    def test_unit_step_sets_mean_variances_to_cauchy_optimum(self):
        step_global(self.state, self.designs, np.arange(3), self.config, iteration=0, step=1.0)
        layer = self.state.layers[0]
        scale = self.state.hyper.mean_scale
        np.testing.assert_allclose(layer.mean_scale.shape, 1.0, rtol=1e-14)
        np.testing.assert_allclose(layer.mean_scale.rate,
                                   0.5 * scale ** 2 + 0.5 * layer.second_moment()[:, :, 0, 0], rtol=1e-12)

    def test_step_advances_iteration_counter(self):
        step_global(self.state, self.designs, [1], self.config, iteration=4)
        self.assertEqual(self.state.iteration, 5)

    def test_rejects_step_outside_unit_interval(self):
        with self.assertRaises(ContractViolation):
            step_global(self.state, self.designs, [0], self.config, iteration=0, step=1.5)

    def test_partial_step_keeps_row_covariances_positive_definite(self):
        step_global(self.state, self.designs, [0, 2], self.config, iteration=0, step=0.4)
        cov = self.state.layers[0].coef_cov
        for k in range(cov.shape[0]):
            for j in range(cov.shape[1]):
                active = np.flatnonzero(self.state.layers[0].mask[j])
                block = cov[k, j][np.ix_(active, active)]
                self.assertTrue(np.all(np.linalg.eigvalsh(block) > 0))


POINT_SHAPE = 1e12


def hold_globals_at_means(state):
    """Collapse every global factor onto its posterior mean."""
    def point(factor):
        return InverseGamma(np.full(factor.shape.shape, POINT_SHAPE), POINT_SHAPE * factor.mean)

    state.sigma2 = point(state.sigma2)
    for layer in state.layers:
        layer.noise = point(layer.noise)
        layer.coef_cov = np.zeros_like(layer.coef_cov)
        layer.dirichlet = POINT_SHAPE * layer.dirichlet / layer.dirichlet.sum()
    return state


def point_evidence(state, data):
    """log p(y | θ) with θ at the current global means, in closed form."""
    mixture = collapse(plugin_dmfa(state))
    sigma2 = float(state.sigma2.mean)
    total = 0.0
    for subject in data:
        x = design(state.basis, subject.times)
        components = [
            np.log(w) + stats.multivariate_normal.logpdf(
                subject.values, x @ mean, x @ cov @ x.T + sigma2 * np.eye(x.shape[0]))
            for w, mean, cov in zip(mixture.weights, mixture.means, mixture.covariances)
        ]
        total += float(special.logsumexp(components))
    return total


class PointGlobalsBoundTests(SimpleTestCase):
    """Local terms never exceed the exact evidence once the globals are fixed"""

    def check_bound(self, data, arch):
        config = make_config(max_iterations=10, local_max_sweeps=200)
        state = hold_globals_at_means(fit(data, arch, config).state)
        designs = SubjectDesigns.build(data, BASIS)
        everyone = np.arange(len(data))
        optimize_local(state, designs, everyone, config)
        bound = float(local_terms(state, designs, everyone).sum())
        evidence = point_evidence(state, data)
        self.assertTrue(np.isfinite(bound))
        self.assertLessEqual(bound, evidence + 1e-6 * (1.0 + abs(evidence)))

    def test_single_component(self):
        self.check_bound(tiny_dataset(), TINY)

    def test_two_components(self):
        self.check_bound(clustered_dataset(TWO_CLUSTERS, per_cluster=4, seed=2),
                         DmfaArchitecture((2,), (3, 1)))


class ObjectiveTests(SimpleTestCase):
    def setUp(self):
        self.data = tiny_dataset()
        self.config = make_config(max_iterations=10)
        self.state = fit(self.data, TINY, self.config).state

    def test_minibatch_estimate_is_unbiased(self):
        full = elbo(self.state, self.data)
        estimates = [elbo(self.state, self.data, subset=[i]) for i in range(3)]
        np.testing.assert_allclose(np.mean(estimates), full, rtol=1e-10)

    def test_closed_form_matches_monte_carlo(self):
        closed = elbo(self.state, self.data)
        estimate = mc_elbo(self.state, self.data, count=2000, seed=11)
        self.assertLessEqual(abs(estimate.mean - closed), 4.0 * estimate.std_error + 1e-6)
        self.assertGreaterEqual(estimate.log_evidence, estimate.mean)

    def test_non_finite_term_is_named(self):
        self.state.layers[0].coef_cov[0, 0] = np.diag([-1.0, 1.0])
        with self.assertRaises(NumericalFailure) as ctx:
            elbo(self.state, self.data)
        self.assertEqual(ctx.exception.label, 'layer1.rows')

    def test_global_terms_are_labelled_per_layer(self):
        terms = global_terms(self.state)
        self.assertIn('observation_noise', terms)
        self.assertIn('layer1.loadings', terms)
        self.assertTrue(all(np.isfinite(v) for v in terms.values()))


class FitTests(SimpleTestCase):
    def test_fit_produces_finite_trace_and_plugin(self):
        result = fit(tiny_dataset(), TINY, make_config(max_iterations=25))
        self.assertEqual(result.elbo_trace.shape, (25,))
        self.assertTrue(np.all(np.isfinite(result.elbo_trace)))
        self.assertEqual(result.plugin.beta_prior.dimension, 3)
        self.assertGreater(result.plugin.sigma2, 0.0)
        self.assertEqual(result.diagnostics['iterations'], 25)

    def test_resume_matches_uninterrupted_fit(self):
        data = clustered_dataset(TWO_CLUSTERS, per_cluster=6, seed=1)
        arch = DmfaArchitecture((2,), (3, 1))
        config = make_config(max_iterations=12, minibatch_size=5)
        whole = fit(data, arch, config)

        half = make_config(max_iterations=6, minibatch_size=5)
        first = fit(data, arch, half)
        document = json.loads(json.dumps(first.state.to_dict()))
        second = fit(data, arch, half, state=VariationalState.from_dict(document))

        np.testing.assert_allclose(np.concatenate([first.elbo_trace, second.elbo_trace]),
                                   whole.elbo_trace, rtol=1e-12)
        np.testing.assert_allclose(second.state.layers[0].coef_mean, whole.state.layers[0].coef_mean,
                                   rtol=1e-12, atol=1e-14)
        self.assertEqual(second.state.iteration, 12)

    def test_same_seed_is_deterministic(self):
        data = clustered_dataset(TWO_CLUSTERS, per_cluster=5, seed=4)
        arch = DmfaArchitecture((2,), (3, 1))
        config = make_config(max_iterations=5, minibatch_size=4)
        first, second = fit(data, arch, config), fit(data, arch, config)
        np.testing.assert_array_equal(first.elbo_trace, second.elbo_trace)
        self.assertEqual(first.plugin.to_dict(), second.plugin.to_dict())

    def test_numerical_failure_carries_snapshot(self):
        failure = NumericalFailure("boom", label='global_step')
        with mock.patch('vi.services.step_global', side_effect=failure):
            with self.assertRaises(NumericalFailure) as ctx:
                fit(tiny_dataset(), TINY, make_config(max_iterations=3))
        self.assertIsInstance(ctx.exception.snapshot, VariationalState)
        self.assertEqual(ctx.exception.snapshot.iteration, 0)

    def test_resumed_state_must_match_dataset(self):
        state = init_state(tiny_dataset(), TINY, make_config())
        with self.assertRaises(ContractViolation):
            fit(tiny_dataset().subset([0, 1]), TINY, make_config(max_iterations=1), state=state)


class PluginTests(SimpleTestCase):
    def setUp(self):
        self.data = clustered_dataset(TWO_CLUSTERS, per_cluster=10, seed=6)
        self.config = make_config()
        self.state = init_state(self.data, DmfaArchitecture((2,), (3, 1)), self.config)

    def test_plugin_density_equals_collapsed_posterior_means(self):
        plugin = prune_and_plugin(self.state, self.config)
        direct = collapse(plugin_dmfa(self.state))
        points = np.random.default_rng(0).normal(scale=3.0, size=(20, 3))
        np.testing.assert_allclose(log_pdf(plugin.beta_prior, points), log_pdf(direct, points),
                                   rtol=1e-12)
        self.assertAlmostEqual(plugin.sigma2, float(self.state.sigma2.mean), places=14)

    def test_light_path_is_pruned_and_weights_renormalized(self):
        self.state.layers[0].dirichlet = np.array([9995.0, 5.0])
        plugin = prune_and_plugin(self.state, self.config)
        self.assertEqual(plugin.beta_prior.n_components, 1)
        self.assertAlmostEqual(float(plugin.beta_prior.weights.sum()), 1.0, places=14)

    def test_pruning_everything_is_a_contract_violation(self):
        with self.assertRaises(ContractViolation):
            prune_and_plugin(self.state, make_config(prune_threshold=0.99))


class ArchitectureSelectionTests(SimpleTestCase):
    def setUp(self):
        self.data = clustered_dataset(THREE_CLUSTERS, per_cluster=12, seed=8)
        self.config = make_config()

    def test_prefers_enough_components(self):
        candidates = [DmfaArchitecture((1,), (3, 1)), DmfaArchitecture((3,), (3, 1))]
        self.assertEqual(select_architecture(self.data, candidates, 20, self.config), candidates[1])

    def test_single_candidate_is_returned(self):
        only = DmfaArchitecture((1,), (3, 1))
        self.assertEqual(select_architecture(self.data, [only], 3, self.config), only)

    def test_invalid_candidate_is_skipped(self):
        candidates = [DmfaArchitecture((2,), (3, 2)), DmfaArchitecture((3,), (3, 1))]
        scores = score_architectures(self.data, candidates, 20, self.config)
        self.assertIsNone(scores[0][1])
        self.assertTrue(scores[0][2])
        self.assertEqual(select_architecture(self.data, candidates, 20, self.config), candidates[1])

    def test_every_candidate_failing(self):
        with self.assertRaises(ContractViolation):
            select_architecture(self.data, [DmfaArchitecture((2,), (3, 2))], 20, self.config)


class SerializerTests(SimpleTestCase):
    def test_state_document_restores_every_factor(self):
        state = init_state(tiny_dataset(), TINY, make_config())
        restored = VariationalState.from_dict(json.loads(json.dumps(state.to_dict())))
        self.assertEqual(restored.to_dict(), state.to_dict())
        np.testing.assert_array_equal(restored.layers[0].coef_cov, state.layers[0].coef_cov)
        self.assertEqual(restored.arch, state.arch)

    def test_rejects_non_positive_shape(self):
        document = init_state(tiny_dataset(), TINY, make_config()).to_dict()
        document['sigma2'] = {'shape': -1.0, 'rate': 1.0}
        with self.assertRaises(ContractViolation):
            VariationalState.from_dict(document)
