import json
import os
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.test import SimpleTestCase

from basis.specs import BasisFamily
from dmlmm.exceptions import DmlmmError, ErrorCode
from .bundle import read_bundle
from .config import load_run_config

SMALL_RUN = """[settings]
seed = 7
basis.family = legendre
basis.dimension = 4
architecture.components = 2
architecture.factor_dims = 1
fit.max_iterations = 4
fit.log_every = 0
simulate.generator = dgp1
simulate.subjects = 24
simulate.holdout = 2
evaluate.hdr_samples = 2000
conflict.prior_draws = 100
conflict.kl_samples = 1000
"""


class WorkspaceMixin:
    """A temporary directory holding a small run configuration."""

    def setUp(self):
        self.workspace = Path(tempfile.mkdtemp())
        self.config_path = self.workspace / 'run.ini'
        self.config_path.write_text(SMALL_RUN)

    def tearDown(self):
        shutil.rmtree(self.workspace, ignore_errors=True)

    def call(self, name, *args, **options):
        stdout, stderr = StringIO(), StringIO()
        options.setdefault('config', str(self.config_path))
        call_command(name, *args, stdout=stdout, stderr=stderr, **options)
        return stdout.getvalue()

    def call_failing(self, name, **options):
        """Exit code and the error document a failing command writes to stderr."""
        stderr = StringIO()
        options.setdefault('config', str(self.config_path))
        with self.assertRaises(SystemExit) as raised:
            call_command(name, stdout=StringIO(), stderr=stderr, **options)
        return raised.exception.code, json.loads(stderr.getvalue().strip().splitlines()[-1])

    def simulate(self, out='sim', **options):
        self.call('simulate', out=str(self.workspace / out), **options)
        return self.workspace / out / 'dgp1.csv'

    def fitted(self, out='fit'):
        data = self.simulate()
        self.call('fit', data=str(data), out=str(self.workspace / out))
        return data, self.workspace / out


class RunConfigTests(WorkspaceMixin, SimpleTestCase):
    def test_file_values_are_cast_and_grouped(self):
        config = load_run_config(self.config_path)
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.basis['dimension'], 4)
        self.assertEqual(config.architecture['components'], [2])
        self.assertEqual(config.fit['max_iterations'], 4)
        self.assertEqual(config.fit['step_power'], 0.75)
        self.assertEqual(config.io['transform'], 'identity')

    def test_overrides_win(self):
        config = load_run_config(self.config_path, {'seed': 11, 'fit.max_iterations': 9, 'io.out': 'x'})
        self.assertEqual((config.seed, config.fit['max_iterations'], config.io['out']), (11, 9, 'x'))

    def test_unset_overrides_keep_file_values(self):
        self.assertEqual(load_run_config(self.config_path, {'seed': None}).seed, 7)

    def test_environment_is_never_read(self):
        with mock.patch.dict(os.environ, {'seed': '99', 'SEED': '99', 'fit.max_iterations': '1'}):
            config = load_run_config(self.config_path)
        self.assertEqual((config.seed, config.fit['max_iterations']), (7, 4))

    def test_missing_seed_is_a_config_error(self):
        self.config_path.write_text("[settings]\nbasis.dimension = 4\n")
        with self.assertRaises(DmlmmError) as raised:
            load_run_config(self.config_path)
        self.assertEqual(raised.exception.code, ErrorCode.INVALID_CONFIG)
        self.assertIn('seed', raised.exception.detail['errors'])

    def test_unknown_key_is_rejected(self):
        with self.assertRaises(DmlmmError) as raised:
            load_run_config(self.config_path, {'fit.max_iteration': 3})
        self.assertEqual(raised.exception.code, ErrorCode.INVALID_CONFIG)
        self.assertEqual(raised.exception.detail['key'], 'fit.max_iteration')

    def test_out_of_range_value_is_rejected(self):
        with self.assertRaises(DmlmmError):
            load_run_config(self.config_path, {'fit.prune_threshold': 1.5})

    def test_missing_file(self):
        with self.assertRaises(DmlmmError) as raised:
            load_run_config(self.workspace / 'absent.ini')
        self.assertEqual(raised.exception.code, ErrorCode.INVALID_CONFIG)

    def test_basis_domain_inferred_from_times(self):
        spec = load_run_config(self.config_path).basis_spec([0.0, 2.0, 1.0])
        self.assertEqual(spec.family, BasisFamily.LEGENDRE)
        self.assertLess(spec.domain[0], 0.0)
        self.assertGreater(spec.domain[1], 2.0)

    def test_composite_basis(self):
        config = load_run_config(self.config_path, {
            'basis.family': 'composite', 'basis.dimension': 10, 'basis.seasonal_dimension': 4,
            'basis.period': 12, 'basis.domain': '1, 128',
        })
        spec = config.basis_spec()
        self.assertEqual(spec.family, BasisFamily.COMPOSITE)
        self.assertEqual(spec.dimension, 10)

    def test_composite_needs_a_period(self):
        with self.assertRaises(DmlmmError):
            load_run_config(self.config_path, {'basis.family': 'composite', 'basis.seasonal_dimension': 2})

    def test_candidates(self):
        config = load_run_config(self.config_path, {'architecture.candidates': '4,2/4,1; 6/2'})
        candidates = config.candidates_for(9)
        self.assertEqual([c.components for c in candidates], [(4, 2), (6,)])
        self.assertEqual([c.dims for c in candidates], [(9, 4, 1), (9, 2)])

    def test_malformed_candidate(self):
        config = load_run_config(self.config_path, {'architecture.candidates': '4,2/3'})
        with self.assertRaises(DmlmmError):
            config.candidates_for(9)

    def test_candidate_breaking_the_dimension_rule(self):
        config = load_run_config(self.config_path, {'architecture.candidates': '2/2'})
        with self.assertRaises(DmlmmError):
            config.candidates_for(4)

    def test_fit_config(self):
        config = load_run_config(self.config_path, {'threads': 2})
        fit_config = config.fit_config(config.basis_spec([0.0, 1.0]), seed=5)
        self.assertIsNone(fit_config.minibatch_size)
        self.assertEqual((fit_config.seed, fit_config.threads, fit_config.max_iterations), (5, 2, 4))


class SimulateCommandTests(WorkspaceMixin, SimpleTestCase):
    def test_dataset_and_sidecar(self):
        path = self.simulate()
        frame = pd.read_csv(path)
        self.assertEqual(frame['subject_id'].nunique(), 24)
        self.assertEqual(int(frame['holdout_flag'].sum()), 48)
        sidecar = json.loads(path.with_suffix('.json').read_text())
        self.assertEqual((sidecar['generator'], sidecar['seed']), ('dgp1', 7))

    def test_rerun_is_byte_identical(self):
        first = self.simulate('a').read_bytes()
        second = self.simulate('b').read_bytes()
        self.assertEqual(first, second)

    def test_replicates_get_distinct_seeds(self):
        out = self.workspace / 'reps'
        self.call('simulate', out=str(out), replicates=3)
        seeds = {json.loads(p.read_text())['seed'] for p in sorted(out.glob('*.json'))}
        self.assertEqual(len(seeds), 3)

    def test_dgp3_defaults(self):
        out = self.workspace / 'dgp3'
        self.config_path.write_text("[settings]\nseed = 1\nsimulate.generator = dgp3\n")
        self.call('simulate', out=str(out))
        frame = pd.read_csv(out / 'dgp3.csv')
        self.assertEqual(frame['subject_id'].nunique(), 120)
        self.assertEqual(len(frame), 120 * 40)

    def test_unknown_generator_exits_2(self):
        code, error = self.call_failing('simulate', generator='dgp9', out=str(self.workspace / 'x'))
        self.assertEqual(code, 2)
        self.assertEqual(error['error'], 'unknown_generator')


class FitCommandTests(WorkspaceMixin, SimpleTestCase):
    def test_writes_bundle_trace_and_clusters(self):
        data, out = self.fitted()
        bundle = read_bundle(out)
        self.assertEqual(bundle.state.iteration, 4)
        self.assertEqual(len(bundle.elbo_trace), 4)
        self.assertNotIn('wall_time', bundle.diagnostics)
        trace = pd.read_csv(out / 'elbo.csv')
        self.assertEqual(list(trace.columns), ['iteration', 'elbo'])
        self.assertEqual(trace['iteration'].tolist(), [1, 2, 3, 4])
        clusters = pd.read_csv(out / 'clusters.csv')
        self.assertEqual(len(clusters), 24)
        self.assertIn('label', clusters.columns)

    def test_rerun_is_byte_identical(self):
        data, out = self.fitted()
        names = ('bundle.json', 'elbo.csv', 'clusters.csv')
        first = {name: (out / name).read_bytes() for name in names}
        self.call('fit', data=str(data), out=str(out))
        for name in names:
            self.assertEqual(first[name], (out / name).read_bytes(), name)

    def test_resume_continues_the_iteration_count(self):
        data, out = self.fitted()
        resumed = self.workspace / 'resumed'
        self.call('fit', data=str(data), out=str(resumed), resume=str(out), max_iterations=2)
        bundle = read_bundle(resumed)
        self.assertEqual(bundle.state.iteration, 6)
        self.assertEqual(pd.read_csv(resumed / 'elbo.csv')['iteration'].tolist(), [1, 2, 3, 4, 5, 6])

    def test_malformed_row_names_the_line(self):
        path = self.workspace / 'bad.csv'
        path.write_text("subject_id,t,y,holdout_flag\na,0.1,1.0,0\na,0.2,oops,0\n")
        code, error = self.call_failing('fit', data=str(path), out=str(self.workspace / 'x'))
        self.assertEqual(code, 2)
        self.assertEqual(error['error'], 'invalid_input')
        self.assertEqual(error['detail']['line'], 3)

    def test_missing_data_path(self):
        code, error = self.call_failing('fit', out=str(self.workspace / 'x'))
        self.assertEqual((code, error['error']), (2, 'invalid_config'))


class PredictCommandTests(WorkspaceMixin, SimpleTestCase):
    def setUp(self):
        super().setUp()
        self.data, self.bundle = self.fitted()

    def predict(self, **options):
        out = self.workspace / 'pred'
        self.call('predict', bundle=str(self.bundle), data=str(self.data), out=str(out), **options)
        return pd.read_csv(out / 'predictions.csv'), json.loads((out / 'predictive.json').read_text())

    def test_subject_band_is_ordered(self):
        table, document = self.predict(subject='s00003', grid_points=15, levels=[0.95, 0.5], threshold=0.0)
        self.assertEqual(len(table), 15)
        self.assertTrue((table['lower'] <= table['mean']).all())
        self.assertTrue((table['mean'] <= table['upper']).all())
        self.assertTrue((table['lower'] <= table['lower_0.5']).all())
        self.assertTrue((table['upper_0.5'] <= table['upper']).all())
        self.assertTrue(table['risk'].between(0.0, 1.0).all())
        self.assertEqual(document['provenance'], 's00003')
        self.assertEqual(len(document['variance']), 15)

    def test_without_subject_is_marginal(self):
        _, document = self.predict(grid_points=5)
        self.assertEqual(document['provenance'], 'marginal')

    def test_external_series(self):
        series = self.workspace / 'series.csv'
        series.write_text("t,y\n0.5,0.2\n0.1,-0.3\n")
        _, document = self.predict(series=str(series), grid_points=5)
        self.assertEqual(document['provenance'], 'series')

    def test_cdf_values_write_cdf_table(self):
        self.predict(subject='s00003', grid_points=4, cdf_values=[1.0, -1.0, 0.0])
        table = pd.read_csv(self.workspace / 'pred' / 'cdf.csv')
        self.assertEqual(list(table.columns), ['t', 'value', 'cdf'])
        self.assertEqual(len(table), 12)
        self.assertTrue(table['cdf'].between(0.0, 1.0).all())
        for _, rows in table.groupby('t'):
            ordered = rows.sort_values('value')['cdf']
            self.assertTrue((ordered.diff().dropna() >= 0).all())

    def test_no_cdf_table_by_default(self):
        self.predict(grid_points=3)
        self.assertFalse((self.workspace / 'pred' / 'cdf.csv').exists())

    def test_log_fit_adds_original_scale_bands(self):
        frame = pd.read_csv(self.data)
        frame['y'] = np.exp(frame['y'])
        positive = self.workspace / 'positive.csv'
        frame.to_csv(positive, index=False)
        bundle = self.workspace / 'log-fit'
        self.call('fit', data=str(positive), out=str(bundle), transform='log')

        out = self.workspace / 'log-pred'
        self.call('predict', bundle=str(bundle), data=str(positive), subject='s00003', grid_points=5,
                  levels=[0.9, 0.5], out=str(out))
        table = pd.read_csv(out / 'predictions.csv')
        for column in ('lower', 'upper', 'lower_0.5', 'upper_0.5'):
            np.testing.assert_allclose(table[f'{column}_original'], np.exp(table[column]), rtol=1e-12)
        self.assertTrue((table['lower_original'] > 0).all())
        self.assertEqual(json.loads((out / 'predictive.json').read_text())['transform'], 'log')

    def test_identity_fit_has_no_original_scale_columns(self):
        table, document = self.predict(grid_points=3)
        self.assertFalse(any(name.endswith('_original') for name in table.columns))
        self.assertEqual(document['transform'], 'identity')

    def test_unknown_subject_exits_2(self):
        code, error = self.call_failing('predict', bundle=str(self.bundle), data=str(self.data),
                                        subject='nobody', out=str(self.workspace / 'x'))
        self.assertEqual((code, error['error']), (2, 'unknown_subject'))

    def test_rerun_is_byte_identical(self):
        self.predict(subject='s00001', grid_points=7)
        first = (self.workspace / 'pred' / 'predictions.csv').read_bytes()
        self.predict(subject='s00001', grid_points=7)
        self.assertEqual(first, (self.workspace / 'pred' / 'predictions.csv').read_bytes())


class EvaluateCommandTests(WorkspaceMixin, SimpleTestCase):
    def test_single_replicate_has_no_sd(self):
        data, bundle = self.fitted()
        out = self.workspace / 'eval'
        self.call('evaluate', data=str(data), bundle=str(bundle), out=str(out), clusters=True)
        summary = pd.read_csv(out / 'metrics_summary.csv')
        self.assertNotIn('sd', summary.columns)
        metrics = json.loads((out / 'metrics.json').read_text())
        self.assertEqual(metrics['replicates'][0]['n_subjects'], 24)
        self.assertTrue((out / 'clusters_ari.csv').exists())

    def test_directory_of_replicates_is_refitted(self):
        out = self.workspace / 'reps'
        self.call('simulate', out=str(out), replicates=2)
        result = self.workspace / 'eval'
        self.call('evaluate', data=str(out), out=str(result), max_iterations=2)
        summary = pd.read_csv(result / 'metrics_summary.csv')
        self.assertIn('sd', summary.columns)
        self.assertEqual(len(pd.read_csv(result / 'metrics.csv')), 2)

    def test_no_holdouts_exits_2(self):
        path = self.simulate(holdout=0)
        code, error = self.call_failing('evaluate', data=str(path), out=str(self.workspace / 'x'))
        self.assertEqual((code, error['error']), (2, 'no_holdouts'))


class ConflictCommandTests(WorkspaceMixin, SimpleTestCase):
    def test_report_document(self):
        data, bundle = self.fitted()
        out = self.workspace / 'conflict'
        self.call('conflict', bundle=str(bundle), data=str(data), subject='s00002', split=2, out=str(out))
        report = json.loads((out / 'conflict.json').read_text())
        self.assertEqual(sorted(report), ['G_observed', 'kl_se', 'n_prior_draws', 'p'])
        self.assertTrue(0.0 <= report['p'] <= 1.0)
        self.assertEqual(report['n_prior_draws'], 100)

    def test_split_is_required(self):
        _, bundle = self.fitted()
        series = self.workspace / 'series.csv'
        series.write_text("t,y\n0.1,0.0\n0.5,0.1\n")
        code, error = self.call_failing('conflict', bundle=str(bundle), series=str(series),
                                        out=str(self.workspace / 'x'))
        self.assertEqual((code, error['error']), (2, 'invalid_config'))


class SelectArchCommandTests(WorkspaceMixin, SimpleTestCase):
    def test_selection_document(self):
        data = self.simulate()
        out = self.workspace / 'select'
        self.call('select_arch', data=str(data), candidates='2/1; 1/1', short_iterations=3, out=str(out))
        selection = json.loads((out / 'selection.json').read_text())
        self.assertEqual(len(selection['candidates']), 2)
        self.assertIn(selection['selected'], [c['architecture'] for c in selection['candidates']])
