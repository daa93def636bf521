import itertools
import json
import math

import numpy as np
from django.test import SimpleTestCase
from scipy import special, stats

from dmlmm.exceptions import ContractViolation
from gmm.mixture import log_pdf, moments
from .architecture import DmfaArchitecture, enumerate_paths, require_valid, validate
from .params import DmfaParams, LayerAuxiliary, LayerParams, PriorAuxiliary, PriorHyper
from .services import collapse, log_dirichlet, log_prior, path_index, sample_beta, sample_paths


def random_params(arch, rng, loading_scale=0.5):
    layers = []
    for layer in range(arch.n_layers):
        count, p, q = arch.layer_shape(layer)
        layers.append(LayerParams(
            rng.dirichlet(np.full(count, 3.0)),
            rng.normal(scale=2.0, size=(count, p)),
            np.tril(rng.normal(scale=loading_scale, size=(count, p, q))),
            rng.uniform(0.1, 0.6, size=(count, p)),
        ))
    return DmfaParams(tuple(layers))


def path_oracle_log_density(params, points):
    """
    Marginalize each path directly: β = c + M (ε_1, ..., ε_L, z_L) with all
    noise terms independent, then sum the path densities.
    """
    terms = []
    for path in enumerate_paths(params.architecture):
        offset = np.zeros(params.dimension)
        blocks, variances = [], []
        transfer = np.eye(params.dimension)
        weight = 1.0
        for layer, k in zip(params.layers, path):
            weight *= layer.weights[k]
            offset = offset + transfer @ layer.means[k]
            blocks.append(transfer.copy())
            variances.append(layer.noise[k])
            transfer = transfer @ layer.loadings[k]
        blocks.append(transfer)
        variances.append(np.ones(transfer.shape[1]))
        stacked = np.hstack(blocks)
        cov = stacked @ np.diag(np.concatenate(variances)) @ stacked.T
        terms.append(np.log(weight) + stats.multivariate_normal.logpdf(points, offset, cov))
    return special.logsumexp(np.column_stack(terms), axis=1)


def inverse_gamma_log_density(x, shape, rate):
    return shape * math.log(rate) - math.lgamma(shape) - (shape + 1) * math.log(x) - rate / x


class ArchitectureTests(SimpleTestCase):
    def test_two_layer_example_is_valid(self):
        self.assertTrue(validate(DmfaArchitecture((3, 2), (7, 3, 1))).ok)

    def test_violation_names_layer(self):
        report = validate(DmfaArchitecture((2,), (4, 2)))
        self.assertFalse(report.ok)
        self.assertEqual(report.violations[0]['layer'], 1)

    def test_boundary_case_is_valid(self):
        self.assertTrue(validate(DmfaArchitecture((1,), (3, 1))).ok)

    def test_sweep_matches_inequality(self):
        for n_layers in (1, 2, 3):
            for dims in itertools.product(range(1, 11), repeat=n_layers + 1):
                expected = all(dims[l + 1] <= (dims[l] - 1) / 2 for l in range(n_layers))
                arch = DmfaArchitecture((2,) * n_layers, dims)
                self.assertEqual(validate(arch).ok, expected, msg=str(dims))

    def test_require_valid_raises(self):
        with self.assertRaises(ContractViolation):
            require_valid(DmfaArchitecture((2,), (4, 2)))

    def test_path_counts(self):
        self.assertEqual(len(enumerate_paths(DmfaArchitecture((3, 2), (7, 3, 1)))), 6)
        self.assertEqual(enumerate_paths(DmfaArchitecture((1, 1, 1), (15, 7, 3, 1))), [(0, 0, 0)])

    def test_paths_are_lexicographic_cartesian_product(self):
        paths = enumerate_paths(DmfaArchitecture((2, 3, 2), (15, 7, 3, 1)))
        self.assertEqual(len(paths), 12)
        self.assertEqual(len(set(paths)), 12)
        self.assertEqual(paths, sorted(paths))
        for path in paths:
            self.assertTrue(all(0 <= k < K for k, K in zip(path, (2, 3, 2))))


class ParamsTests(SimpleTestCase):
    def test_loadings_are_masked_on_write(self):
        layer = LayerParams([1.0], np.zeros((1, 3)), np.ones((1, 3, 1)), np.ones((1, 3)))
        np.testing.assert_array_equal(layer.loadings[0], [[1.0], [1.0], [1.0]])
        wide = LayerParams([1.0], np.zeros((1, 5)), np.ones((1, 5, 2)), np.ones((1, 5)))
        self.assertEqual(wide.loadings[0, 0, 1], 0.0)

    def test_rejects_nonpositive_noise(self):
        with self.assertRaises(ContractViolation):
            LayerParams([1.0], np.zeros((1, 3)), np.zeros((1, 3, 1)), np.zeros((1, 3)))

    def test_document_round_trip(self):
        params = random_params(DmfaArchitecture((3, 2), (7, 3, 1)), np.random.default_rng(0))
        restored = DmfaParams.from_dict(json.loads(json.dumps(params.to_dict())))
        self.assertEqual(restored.architecture, params.architecture)
        for a, b in zip(restored.layers, params.layers):
            np.testing.assert_array_equal(a.loadings, b.loadings)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_default_dirichlet_is_one_over_k(self):
        arch = DmfaArchitecture((4, 2), (9, 4, 1))
        self.assertEqual(PriorHyper().concentration(arch), (0.25, 0.5))


class CollapseTests(SimpleTestCase):
    def test_single_layer_is_factor_analyzer(self):
        params = random_params(DmfaArchitecture((3,), (5, 2)), np.random.default_rng(1))
        gmm = collapse(params)
        layer = params.layers[0]
        for k in range(3):
            expected = layer.loadings[k] @ layer.loadings[k].T + np.diag(layer.noise[k])
            np.testing.assert_allclose(gmm.covariances[k], expected, atol=1e-14)
            np.testing.assert_array_equal(gmm.means[k], layer.means[k])

    def test_zero_loadings_decouple_layers(self):
        rng = np.random.default_rng(2)
        arch = DmfaArchitecture((2, 3), (7, 3, 1))
        base = random_params(arch, rng)
        params = DmfaParams(tuple(
            LayerParams(layer.weights, layer.means, np.zeros_like(layer.loadings), layer.noise)
            for layer in base.layers
        ))
        gmm = collapse(params)
        for index, (k1, _) in enumerate(enumerate_paths(arch)):
            np.testing.assert_array_equal(gmm.means[index], params.layers[0].means[k1])
            np.testing.assert_array_equal(gmm.covariances[index], np.diag(params.layers[0].noise[k1]))

    def test_first_layer_noise_scaling(self):
        rng = np.random.default_rng(3)
        arch = DmfaArchitecture((2, 2), (7, 3, 1))
        params = random_params(arch, rng)
        first = params.layers[0]
        scaled = DmfaParams((
            LayerParams(first.weights, first.means, first.loadings, 3.0 * first.noise),
        ) + params.layers[1:])
        base, bigger = collapse(params), collapse(scaled)
        for index, (k1, _) in enumerate(enumerate_paths(arch)):
            np.testing.assert_allclose(
                bigger.covariances[index] - base.covariances[index],
                np.diag(2.0 * first.noise[k1]), atol=1e-12,
            )

    def test_weights_sum_to_one(self):
        params = random_params(DmfaArchitecture((3, 4), (9, 4, 1)), np.random.default_rng(4))
        self.assertAlmostEqual(collapse(params).weights.sum(), 1.0, delta=1e-12)

    def test_log_density_matches_path_enumeration(self):
        params = random_params(DmfaArchitecture((3, 2), (7, 3, 1)), np.random.default_rng(5))
        points = sample_beta(params, 10 ** 4, seed=6)
        np.testing.assert_allclose(
            log_pdf(collapse(params), points), path_oracle_log_density(params, points),
            rtol=0, atol=1e-8,
        )

    def test_moments_match_ancestral_samples(self):
        params = random_params(DmfaArchitecture((3, 2), (7, 3, 1)), np.random.default_rng(7))
        count = 10 ** 6
        draws = sample_beta(params, count, seed=8)
        mean, cov = moments(collapse(params))
        se = np.sqrt(np.diag(cov) / count)
        self.assertTrue(np.all(np.abs(draws.mean(axis=0) - mean) < 4 * se))
        np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.02, atol=0.02)


class SampleTests(SimpleTestCase):
    def test_noiseless_samples_sit_on_first_layer_means(self):
        means = np.array([[0.0, 1.0, 2.0], [5.0, 5.0, 5.0]])
        params = DmfaParams((
            LayerParams([0.5, 0.5], means, np.zeros((2, 3, 1)), np.full((2, 3), 1e-14)),
        ))
        draws = sample_beta(params, 500, seed=0)
        gaps = np.min(np.linalg.norm(draws[:, None, :] - means[None], axis=2), axis=1)
        self.assertTrue(np.all(gaps < 1e-5))

    def test_seed_reproducibility(self):
        params = random_params(DmfaArchitecture((2, 2), (7, 3, 1)), np.random.default_rng(9))
        np.testing.assert_array_equal(sample_beta(params, 100, 11), sample_beta(params, 100, 11))

    def test_path_occupancy_matches_collapsed_weights(self):
        params = random_params(DmfaArchitecture((3, 2), (7, 3, 1)), np.random.default_rng(10))
        count = 50000
        _, labels = sample_paths(params, count, seed=12)
        freqs = np.bincount(path_index(params, labels), minlength=6) / count
        weights = collapse(params).weights
        self.assertTrue(np.all(np.abs(freqs - weights) < 4 * np.sqrt(weights * (1 - weights) / count)))


class LogPriorTests(SimpleTestCase):
    def setUp(self):
        self.arch = DmfaArchitecture((2,), (3, 1))
        self.hyper = PriorHyper(dirichlet=(1.0,))

    def zero_params(self):
        return DmfaParams((
            LayerParams([0.5, 0.5], np.zeros((2, 3)), np.zeros((2, 3, 1)), np.ones((2, 3))),
        ))

    def test_zero_parameters_match_scalar_oracle(self):
        value = log_prior(self.zero_params(), self.hyper, PriorAuxiliary.unit(self.arch))
        cauchy = -math.log(math.pi)
        pair = 2 * inverse_gamma_log_density(1.0, 0.5, 1.0)
        normal = -0.5 * math.log(2 * math.pi)
        n_means, n_noise, n_free = 6, 6, 2 * 3
        expected = (
            n_means * cauchy + n_noise * pair
            + n_free * (normal + pair) + 2 * pair
            + math.lgamma(2.0)
        )
        self.assertAlmostEqual(value, expected, places=10)

    def test_larger_loading_lowers_prior(self):
        aux = PriorAuxiliary.unit(self.arch)
        base = self.zero_params().layers[0]
        loadings = np.array(base.loadings)
        loadings[0, 1, 0] = 0.7
        small = DmfaParams((LayerParams(base.weights, base.means, loadings, base.noise),))
        loadings[0, 1, 0] = 1.4
        large = DmfaParams((LayerParams(base.weights, base.means, loadings, base.noise),))
        self.assertLess(log_prior(large, self.hyper, aux), log_prior(small, self.hyper, aux))

    def test_flat_dirichlet_is_constant(self):
        for weights in ([0.2, 0.3, 0.5], [0.9, 0.05, 0.05]):
            self.assertAlmostEqual(log_dirichlet(weights, 1.0), math.lgamma(3.0), places=12)

    def test_nonpositive_scales_are_rejected(self):
        with self.assertRaises(ContractViolation):
            PriorHyper(mean_scale=0.0)
        with self.assertRaises(ContractViolation):
            LayerAuxiliary(np.zeros((2, 3)), np.ones((2, 3, 1)), np.ones((2, 3, 1)), np.ones(2), np.ones(2))
