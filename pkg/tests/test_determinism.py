"""
Determinism Testing Suite
Every command rerun with the same configuration and seed writes byte-identical
files; results do not depend on input row order; failures map to exit codes.
"""
import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import pandas as pd
from django.core.management import call_command
from django.test import SimpleTestCase

from dmlmm.exceptions import NumericalFailure
from predict.serializers import ConflictReportSerializer
from simlab.generators import generate
from simlab.io import write_dataset

RUN = """[settings]
seed = 13
basis.family = legendre
basis.dimension = 4
architecture.components = 2
architecture.factor_dims = 1
fit.max_iterations = 3
fit.log_every = 0
simulate.subjects = 16
simulate.holdout = 2
simulate.count = 30
simulate.length = 24
simulate.reject = false
evaluate.hdr_samples = 1000
evaluate.k_neighbors = 5
evaluate.train = 20
evaluate.split = 16
conflict.split = 3
conflict.prior_draws = 100
conflict.kl_samples = 1000
predict.subject = s00004
"""


class CommandRunner(SimpleTestCase):
    """Runs each command twice into the same directory and compares the files"""

    def setUp(self):
        self.workspace = Path(tempfile.mkdtemp())
        self.config = self.workspace / 'run.ini'
        self.config.write_text(RUN)

    def tearDown(self):
        shutil.rmtree(self.workspace, ignore_errors=True)

    def call(self, name, **options):
        call_command(name, config=str(self.config), stdout=StringIO(), stderr=StringIO(), **options)

    def assert_rerun_identical(self, name, files, **options):
        out = self.workspace / name
        self.call(name, out=str(out), **options)
        first = {f: (out / f).read_bytes() for f in files}
        self.call(name, out=str(out), **options)
        for f in files:
            self.assertEqual(first[f], (out / f).read_bytes(), f'{name}: {f}')
        return out

    def dataset(self, generator='dgp1'):
        out = self.workspace / f'data-{generator}'
        self.call('simulate', generator=generator, out=str(out))
        return out / f'{generator}.csv'

    def bundle(self, data):
        out = self.workspace / 'bundle'
        self.call('fit', data=str(data), out=str(out))
        return out


class CommandDeterminismTests(CommandRunner):
    def test_simulate_every_generator(self):
        for generator in ('dgp1', 'dgp3', 'blackbox'):
            self.assert_rerun_identical('simulate', [f'{generator}.csv', f'{generator}.json'],
                                        generator=generator)

    def test_simulate_dgp2(self):
        self.assert_rerun_identical('simulate', ['dgp2.csv', 'dgp2.json'], generator='dgp2', subjects=3)

    def test_fit(self):
        self.assert_rerun_identical('fit', ['bundle.json', 'elbo.csv', 'clusters.csv'], data=str(self.dataset()))

    def test_predict(self):
        data = self.dataset()
        self.assert_rerun_identical('predict', ['predictions.csv', 'predictive.json'],
                                    data=str(data), bundle=str(self.bundle(data)), grid_points=9)

    def test_evaluate(self):
        data = self.dataset()
        self.assert_rerun_identical('evaluate', ['metrics.json', 'metrics.csv', 'metrics_summary.csv'],
                                    data=str(data), bundle=str(self.bundle(data)))

    def test_evaluate_abc_comparison(self):
        samples = self.dataset('blackbox')
        self.assert_rerun_identical('evaluate', ['comparison.csv', 'metrics_abc.json', 'metrics_dmlmm.json'],
                                    samples=str(samples))

    def test_conflict(self):
        data = self.dataset()
        out = self.assert_rerun_identical('conflict', ['conflict.json'], data=str(data),
                                          bundle=str(self.bundle(data)))
        serializer = ConflictReportSerializer(data=json.loads((out / 'conflict.json').read_text()))
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_select_arch(self):
        self.assert_rerun_identical('select_arch', ['selection.json'], data=str(self.dataset()),
                                    candidates='1/1; 2/1')


class InputOrderTests(CommandRunner):
    def test_metrics_ignore_row_order(self):
        data = self.dataset()
        bundle = self.bundle(data)
        shuffled = self.workspace / 'shuffled.csv'
        pd.read_csv(data).sample(frac=1.0, random_state=0).to_csv(shuffled, index=False)
        for name, path in (('ordered', data), ('shuffled', shuffled)):
            self.call('evaluate', data=str(path), bundle=str(bundle), out=str(self.workspace / name))
        ordered, reshuffled = (pd.read_csv(self.workspace / name / 'metrics.csv').drop(columns='name')
                               for name in ('ordered', 'shuffled'))
        pd.testing.assert_frame_equal(ordered, reshuffled, check_exact=True)

    def test_sidecar_seed_reproduces_the_dataset(self):
        path = self.dataset()
        sidecar = json.loads(path.with_suffix('.json').read_text())
        params = sidecar['params']
        rebuilt = generate(sidecar['generator'], sidecar['seed'],
                           n_subjects=params['n_subjects'], n_holdout=params['n_holdout'])
        copy = write_dataset(rebuilt, self.workspace / 'rebuilt.csv')
        self.assertEqual(path.read_bytes(), copy.read_bytes())


class ExitCodeTests(CommandRunner):
    def test_numerical_failure_exits_3(self):
        data = self.dataset()
        stderr = StringIO()
        failure = NumericalFailure("objective is not finite", label='layer1.rows')
        with mock.patch('cli.management.commands.fit.fit', side_effect=failure):
            with self.assertRaises(SystemExit) as raised:
                call_command('fit', config=str(self.config), data=str(data), out=str(self.workspace / 'x'),
                             stdout=StringIO(), stderr=stderr)
        self.assertEqual(raised.exception.code, 3)
        error = json.loads(stderr.getvalue().strip())
        self.assertEqual(error['error'], 'numerical_failure')
        self.assertEqual(error['detail']['label'], 'layer1.rows')
