import itertools
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase
from scipy import integrate

from basis.specs import BasisSpec
from dmlmm.exceptions import ContractViolation, DmlmmError, ErrorCode, InputError
from gmm.mixture import GaussianMixture
from predict.plugin import PluginParams, PredictiveResult
from .blackbox import (
    AbcEnsemble, abc_predict, exceeds_cases, samples_to_dataset, seasonal_generator,
    simulate_blackbox, split_samples,
)
from .dataset import LongitudinalDataset, SimulatorSample, SubjectRecord
from .generators import (
    DGP1_XI_SD, DGP3_AMPLITUDES, DGP3_COS_FREQ, DGP3_SIN_FREQ, dgp1_signal, euler_maruyama,
    gen_dgp1, gen_dgp2, gen_dgp3, generate, van_der_pol_drift,
)
from .io import read_dataset, read_samples, write_dataset, write_metrics, write_samples
from .metrics import (
    MetricsReport, Prediction, abc_benchmark, cluster_agreement, evaluate, predict_holdouts,
)
from .services import inverse_transform, replicate_seeds, transform_series, transform_values

BASIS = BasisSpec.legendre(3, (0.0, 1.0))


def constant_generator(value=1.0, length=5):
    def draw(rng):
        return SimulatorSample(np.full(length, value), {'params': {'value': value}})
    return draw


def random_walk_samples(count, length, seed):
    rng = np.random.default_rng(seed)
    return [SimulatorSample(np.cumsum(rng.normal(size=length))) for _ in range(count)]


def point_prediction(subject_id, mean, sd, truth):
    mixture = GaussianMixture.single(np.asarray(mean, dtype=float), np.diag(np.square(sd)))
    grid = np.arange(1.0, len(mean) + 1.0)
    return Prediction(subject_id, PredictiveResult(mixture, grid, subject_id), np.asarray(truth, dtype=float))


class Dgp1Tests(SimpleTestCase):
    def test_shapes_and_labels(self):
        data = gen_dgp1(seed=1)
        self.assertEqual(len(data), 600)
        self.assertTrue(all(s.n_observed == 10 for s in data))
        self.assertTrue(set(data.labels) <= {-1, 1})
        self.assertTrue(all(np.all((s.times >= 0) & (s.times <= 1)) for s in data))

    def test_deterministic_under_seed(self):
        first, second = gen_dgp1(50, seed=4), gen_dgp1(50, seed=4)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.values, b.values)
        self.assertFalse(np.array_equal(first[0].values, gen_dgp1(50, seed=5)[0].values))

    def test_group_mean_is_sine(self):
        rng = np.random.default_rng(0)
        n, t = 100_000, 0.3
        xi = rng.normal(size=(n, DGP1_XI_SD.size)) * DGP1_XI_SD
        y = dgp1_signal(np.ones(n), xi, np.full((n, 1), t))[:, 0] + rng.normal(scale=0.3, size=n)
        self.assertLess(abs(y.mean() - np.sin(4 * np.pi * t)), 4 * y.std() / np.sqrt(n))

    def test_functional_error_variance_at_midpoint(self):
        rng = np.random.default_rng(1)
        n = 100_000
        xi = rng.normal(size=(n, DGP1_XI_SD.size)) * DGP1_XI_SD
        functional = dgp1_signal(np.zeros(n), xi, np.full((n, 1), 0.5))[:, 0]
        k = np.arange(1, 5)
        expected = 2 * np.sum(DGP1_XI_SD ** 2 * np.sin(k * np.pi / 2) ** 2)
        self.assertAlmostEqual(functional.var() / expected, 1.0, delta=0.03)

    def test_group_residuals_centre_on_zero(self):
        data = gen_dgp1(2000, seed=3)
        residuals = np.concatenate([
            s.values - s.label * np.sin(4 * np.pi * s.times) for s in data
        ])
        # Points of one subject share its functional error
        self.assertLess(abs(residuals.mean()), 8 * residuals.std() / np.sqrt(residuals.size))

    def test_holdout_points(self):
        data = gen_dgp1(20, seed=2, n_holdout=3)
        self.assertTrue(all(s.n_observed == 10 and s.n_holdout == 3 for s in data))


class Dgp2Tests(SimpleTestCase):
    def test_counts_and_window(self):
        data = gen_dgp2(6, seed=2)
        for subject in data:
            self.assertTrue(15 <= subject.n_observed <= 25)
            self.assertTrue(np.all((subject.times >= 10) & (subject.times <= 20)))
            self.assertTrue(np.all(np.isfinite(subject.values)))

    def test_deterministic_under_seed(self):
        first, second = gen_dgp2(3, seed=8), gen_dgp2(3, seed=8)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.values, b.values)

    def test_noise_free_path_matches_ode_solution(self):
        theta = np.array([1.0])

        def rhs(t, state):
            f, g = state
            return [g, theta[0] * (1 - f ** 2) * g - f]

        exact = integrate.solve_ivp(rhs, (0.0, 10.0), [1.0, 0.1], rtol=1e-10, atol=1e-12).y[0, -1]
        values, blown = euler_maruyama(van_der_pol_drift(theta), [[1.0, 0.1]], 0.0, [10.0],
                                       2.5e-4, np.random.default_rng(0))
        self.assertFalse(blown.any())
        self.assertLess(abs(values[0, 0, 0] - exact), 1e-2)

    def test_step_refinement_preserves_path_law(self):
        theta = np.full(4000, np.e)
        initial = np.tile([1.0, 0.1], (theta.size, 1))
        coarse, _ = euler_maruyama(van_der_pol_drift(theta), initial, 0.5, [3.0], 2e-3, np.random.default_rng(1))
        fine, _ = euler_maruyama(van_der_pol_drift(theta), initial, 0.5, [3.0], 1e-3, np.random.default_rng(2))
        a, b = coarse[0, :, 0], fine[0, :, 0]
        se = np.sqrt(a.var() / a.size + b.var() / b.size)
        self.assertLess(abs(a.mean() - b.mean()), 3 * se)

    def test_explosive_path_is_flagged(self):
        _, blown = euler_maruyama(lambda s: 1e4 * s, np.ones((2, 2)), 0.0, [1.0], 1e-2,
                                  np.random.default_rng(0))
        self.assertTrue(blown.all())

    def test_blown_subjects_are_resampled(self):
        calls = []

        def fake(theta, union, rng, step, diffusion):
            calls.append(theta.size)
            blown = np.zeros(theta.size, dtype=bool)
            if len(calls) == 1:
                blown[0] = True
            return np.full((union.size, theta.size), float(len(calls))), blown

        with mock.patch('simlab.generators._van_der_pol_observations', side_effect=fake):
            with self.assertLogs('simlab.generators', level='WARNING'):
                data = gen_dgp2(3, seed=0)
        self.assertEqual(calls, [3, 1])
        self.assertTrue(np.all(data[0].values == 2.0))
        self.assertTrue(np.all(data[1].values == 1.0))


class Dgp3Tests(SimpleTestCase):
    def test_rows_grid_and_holdouts(self):
        data = gen_dgp3(seed=3)
        self.assertEqual(len(data), 120)
        for subject in data:
            self.assertEqual(subject.n_observed + subject.n_holdout, 40)
            self.assertTrue(15 <= subject.n_holdout <= 20)
            grid = np.sort(np.concatenate([subject.times, subject.holdout_times]))
            np.testing.assert_array_equal(grid, np.arange(1, 41))

    def test_labels_come_from_the_36_combinations(self):
        combos = set(itertools.product(DGP3_AMPLITUDES, DGP3_AMPLITUDES, DGP3_COS_FREQ, DGP3_SIN_FREQ))
        self.assertEqual(len(combos), 36)
        self.assertTrue(set(gen_dgp3(seed=5).labels) <= combos)

    def test_unknown_generator(self):
        with self.assertRaises(DmlmmError) as ctx:
            generate('dgp9', seed=0)
        self.assertEqual(ctx.exception.code, ErrorCode.UNKNOWN_GENERATOR)
        self.assertEqual(ctx.exception.exit_code, 2)


class BlackboxTests(SimpleTestCase):
    def test_constant_generator_gives_identical_samples(self):
        samples = simulate_blackbox(constant_generator(), 4, seed=1)
        self.assertEqual(len(samples), 4)
        for sample in samples:
            np.testing.assert_array_equal(sample.series, np.ones(5))
        self.assertEqual([s.record['seed'] for s in samples], [[1, a] for a in range(4)])

    def test_permissive_predicate_accepts_every_draw(self):
        samples = simulate_blackbox(constant_generator(), 3, seed=0, predicate=lambda s: True)
        self.assertEqual([s.record['seed'][1] for s in samples], [0, 1, 2])

    def test_low_acceptance_aborts(self):
        with mock.patch('simlab.blackbox.ACCEPTANCE_WINDOW', 50):
            with self.assertRaises(ContractViolation):
                simulate_blackbox(constant_generator(), 2, seed=0, predicate=lambda s: False)

    def test_seasonal_series_and_case_predicate(self):
        samples = simulate_blackbox(seasonal_generator(), 10, seed=2, predicate=exceeds_cases())
        self.assertTrue(all(s.length == 128 for s in samples))
        self.assertTrue(all(np.expm1(s.series).max() > 100 for s in samples))
        quiet = SimulatorSample(np.log1p(np.full(128, 5.0)), {'scale': 'log1p'})
        self.assertFalse(exceeds_cases()(quiet))

    def test_replay_from_recorded_seed(self):
        generator = seasonal_generator(length=20)
        sample = simulate_blackbox(generator, 3, seed=6)[2]
        replay = generator(np.random.default_rng(sample.record['seed']))
        np.testing.assert_array_equal(replay.series, sample.series)

    def test_train_test_split(self):
        samples = random_walk_samples(10, 4, seed=0)
        train, test = split_samples(samples, 7)
        self.assertEqual((len(train), len(test)), (7, 3))

    def test_samples_to_dataset_holds_out_suffix(self):
        samples = random_walk_samples(3, 6, seed=1)
        data = samples_to_dataset(samples, split=4)
        np.testing.assert_array_equal(data[0].times, [1, 2, 3, 4])
        np.testing.assert_array_equal(data[0].holdout_values, samples[0].series[4:])


class AbcTests(SimpleTestCase):
    def test_exact_prefix_returns_its_suffix(self):
        train = random_walk_samples(50, 8, seed=2)
        ensemble = abc_predict(train, train[17].series[:5], k_neighbors=1)
        np.testing.assert_array_equal(ensemble.suffixes[0], train[17].series[5:])
        self.assertEqual(ensemble.distances[0], 0.0)

    def test_all_neighbours_is_the_marginal_sample(self):
        train = random_walk_samples(30, 6, seed=3)
        ensemble = abc_predict(train, np.zeros(2), k_neighbors=30)
        expected = np.sort(np.vstack([s.series[2:] for s in train]), axis=0)
        np.testing.assert_array_equal(np.sort(ensemble.suffixes, axis=0), expected)

    def test_all_neighbours_ignores_training_order(self):
        train = random_walk_samples(25, 6, seed=4)
        forward = abc_predict(train, np.ones(3), k_neighbors=25)
        backward = abc_predict(train[::-1], np.ones(3), k_neighbors=25)
        np.testing.assert_allclose(forward.mean, backward.mean, atol=1e-12)

    def test_preconditions(self):
        train = random_walk_samples(5, 6, seed=5)
        with self.assertRaises(ContractViolation):
            abc_predict([], np.zeros(2), 1)
        with self.assertRaises(ContractViolation):
            abc_predict(train, np.zeros(2), 6)
        with self.assertRaises(ContractViolation):
            abc_predict(train, np.zeros(6), 1)

    def test_near_optimal_on_a_mean_model(self):
        rng = np.random.default_rng(7)

        def series(count):
            prefix = rng.normal(size=(count, 1))
            return np.hstack([prefix, prefix + 0.5 * rng.normal(size=(count, 1))])

        train = [SimulatorSample(row) for row in series(5000)]
        test = series(400)
        optimal = np.sqrt(np.mean((test[:, 1] - test[:, 0]) ** 2))
        best = min(
            np.sqrt(np.mean([(abc_predict(train, row[:1], k).mean[0] - row[1]) ** 2 for row in test]))
            for k in (20, 50, 100)
        )
        self.assertLess(best, 1.1 * optimal)

    def test_kernel_mixture_centres_on_members(self):
        ensemble = AbcEnsemble(np.array([[0.0, 1.0], [2.0, 3.0]]), np.arange(2), np.zeros(2), split=3)
        mixture = ensemble.kernel_mixture()
        np.testing.assert_array_equal(mixture.means, ensemble.suffixes)
        np.testing.assert_array_equal(ensemble.as_predictive().grid, [4.0, 5.0])


class MetricsTests(SimpleTestCase):
    def test_perfect_prediction(self):
        report = evaluate([point_prediction('a', [1.0, 2.0], [0.1, 0.1], [1.0, 2.0])], hdr_levels=())
        metrics = report.replicates[0]
        self.assertEqual(metrics.rmse, 0.0)
        self.assertEqual(metrics.log_rmse, -np.inf)

    def test_standard_normal_log_score(self):
        report = evaluate([point_prediction('a', [0.0], [1.0], [0.0])], hdr_levels=())
        self.assertAlmostEqual(report.replicates[0].neg_log_score, 0.5 * np.log(2 * np.pi), places=12)

    def test_coverage_counts(self):
        predictions = [
            point_prediction('a', [0.0, 0.0], [1.0, 1.0], [0.1, 5.0]),
            point_prediction('b', [0.0, 0.0], [1.0, 1.0], [-0.2, 0.3]),
        ]
        metrics = evaluate(predictions, n_hdr_samples=5000).replicates[0]
        self.assertEqual(metrics.pointwise_coverage[0.95], 0.75)
        self.assertEqual(metrics.n_points, 4)
        self.assertEqual(metrics.elliptical_coverage[0.9], 0.5)

    def test_subject_order_does_not_matter(self):
        predictions = [
            point_prediction(f's{i}', [0.0, 0.5], [1.0, 2.0], [0.3 * i, -0.1 * i]) for i in range(5)
        ]
        forward = evaluate(predictions, n_hdr_samples=2000, seed=1).to_dict()
        backward = evaluate(predictions[::-1], n_hdr_samples=2000, seed=1).to_dict()
        self.assertEqual(forward, backward)

    def test_nothing_to_evaluate(self):
        with self.assertRaises(DmlmmError) as ctx:
            evaluate([])
        self.assertEqual(ctx.exception.code, ErrorCode.NO_HOLDOUTS)

    def test_summary_sd_only_for_several_replicates(self):
        one = evaluate([point_prediction('a', [0.0], [1.0], [0.5])], hdr_levels=(), name='r1')
        two = evaluate([point_prediction('a', [0.0], [1.0], [1.5])], hdr_levels=(), name='r2')
        self.assertNotIn('sd', one.summary().columns)
        combined = MetricsReport.combine([one, two])
        self.assertIn('sd', combined.summary().columns)
        self.assertEqual(list(combined.table()['name']), ['r1', 'r2'])

    def test_holdout_predictions_and_clusters(self):
        means = np.array([[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]])
        plugin = PluginParams(GaussianMixture([0.5, 0.5], means, np.stack([0.01 * np.eye(3)] * 2)), 0.01, BASIS)
        rng = np.random.default_rng(0)
        times = np.linspace(0.05, 0.95, 8)
        x = plugin.design(times)
        subjects = []
        for i in range(10):
            label = i % 2
            y = x @ means[label] + 0.1 * rng.standard_normal(times.size)
            subjects.append(SubjectRecord(f's{i}', times[:5], y[:5], times[5:], y[5:], label=label))
        data = LongitudinalDataset(tuple(subjects))
        predictions = predict_holdouts(plugin, data)
        self.assertEqual(len(predictions), 10)
        metrics = evaluate(predictions, n_hdr_samples=2000).replicates[0]
        self.assertEqual(metrics.n_points, 30)
        self.assertLess(metrics.rmse, 0.5)
        self.assertAlmostEqual(cluster_agreement(plugin, data), 1.0)

    def test_no_holdouts_rejected(self):
        plugin = PluginParams(GaussianMixture.single(np.zeros(3), np.eye(3)), 0.1, BASIS)
        data = LongitudinalDataset((SubjectRecord('a', [0.1, 0.5], [1.0, 2.0]),))
        with self.assertRaises(DmlmmError):
            predict_holdouts(plugin, data)

    def test_abc_benchmark_reports_both_methods(self):
        basis = BasisSpec.legendre(3, (0.5, 6.5))
        plugin = PluginParams(GaussianMixture.single(np.zeros(3), np.eye(3)), 0.5, basis)
        train, test = random_walk_samples(40, 6, seed=1), random_walk_samples(5, 6, seed=2)
        report = abc_benchmark(train, test, 3, plugin, k_neighbors=10, n_hdr_samples=2000)
        self.assertEqual([r.name for r in report.replicates], ['dmlmm', 'abc'])
        self.assertEqual(report.replicates[1].n_points, 15)


class IoTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_dataset_round_trip(self):
        data = gen_dgp3(6, seed=2)
        path = write_dataset(data, self.dir / 'dgp3.csv', sidecar={'generator': 'dgp3', 'seed': 2})
        restored = read_dataset(path)
        self.assertEqual(restored.ids, data.ids)
        for a, b in zip(data, restored):
            np.testing.assert_array_equal(a.values, b.values)
            np.testing.assert_array_equal(a.holdout_times, b.holdout_times)
        self.assertEqual(restored[0].label.count('|'), 3)
        self.assertTrue((self.dir / 'dgp3.json').exists())

    def test_row_order_does_not_matter(self):
        path = write_dataset(gen_dgp1(5, seed=1), self.dir / 'a.csv')
        lines = path.read_text().splitlines()
        shuffled = self.dir / 'b.csv'
        body = lines[1:]
        np.random.default_rng(0).shuffle(body)
        shuffled.write_text('\n'.join([lines[0]] + body) + '\n')
        for a, b in zip(read_dataset(path), read_dataset(shuffled)):
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.values, b.values)

    def test_malformed_row_names_its_line(self):
        path = self.dir / 'bad.csv'
        path.write_text('subject_id,t,y,holdout_flag\na,0.1,1.0,0\na,0.2,1.5,0\na,0.3,2.0,0,7\n')
        with self.assertRaises(InputError) as ctx:
            read_dataset(path)
        self.assertEqual(ctx.exception.detail['line'], 4)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_non_numeric_value_names_its_line(self):
        path = self.dir / 'bad.csv'
        path.write_text('subject_id,t,y,holdout_flag\na,0.1,1.0,0\na,zero,1.5,0\n')
        with self.assertRaises(InputError) as ctx:
            read_dataset(path)
        self.assertEqual(ctx.exception.detail['line'], 3)

    def test_missing_file(self):
        with self.assertRaises(InputError):
            read_dataset(self.dir / 'absent.csv')

    def test_samples_round_trip(self):
        samples = simulate_blackbox(seasonal_generator(length=16), 4, seed=3)
        path = write_samples(samples, self.dir / 'samples.csv', 'seasonal', 3)
        restored, sidecar = read_samples(path)
        self.assertEqual(sidecar['length'], 16)
        for a, b in zip(samples, restored):
            np.testing.assert_array_equal(a.series, b.series)
            self.assertEqual(b.record['seed'], a.record['seed'])

    def test_metrics_files(self):
        report = evaluate([point_prediction('a', [0.0], [1.0], [0.5])], hdr_levels=())
        paths = write_metrics(report, self.dir)
        self.assertTrue(all(p.exists() for p in paths))


class TransformTests(SimpleTestCase):
    def test_probit_round_trip(self):
        data = LongitudinalDataset((SubjectRecord('a', [1.0, 2.0], [20.0, 50.0], [3.0], [80.0]),))
        moved = transform_values(data, 'probit')
        self.assertAlmostEqual(moved[0].values[1], 0.0, places=12)
        np.testing.assert_allclose(inverse_transform(moved[0].holdout_values, 'probit'), [80.0])

    def test_log_needs_positive_values(self):
        data = LongitudinalDataset((SubjectRecord('a', [1.0], [0.0]),))
        with self.assertRaises(ContractViolation):
            transform_values(data, 'log')

    def test_unknown_transform(self):
        with self.assertRaises(ContractViolation):
            transform_values(LongitudinalDataset(()), 'sqrt')

    def test_series_transform(self):
        np.testing.assert_allclose(transform_series([1.0, np.e], 'log'), [0.0, 1.0])
        with self.assertRaises(ContractViolation):
            transform_series([1.0], 'sqrt')

    def test_replicate_seeds(self):
        seeds = replicate_seeds(7, 5)
        self.assertEqual(seeds, replicate_seeds(7, 5))
        self.assertEqual(len(set(seeds)), 5)
        self.assertEqual(replicate_seeds(7, 6)[:5], seeds)
