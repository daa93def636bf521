import logging
from pathlib import Path

import pandas as pd

from dmlmm.exceptions import DmlmmError, ErrorCode
from simlab import metrics
from simlab.blackbox import samples_to_dataset, split_samples
from simlab.io import FLOAT_FORMAT, read_samples, write_metrics
from simlab.services import replicate_seeds
from vi.services import fit
from cli.base import DmlmmCommand
from cli.bundle import read_bundle
from cli.config import config_error

logger = logging.getLogger(__name__)


class Command(DmlmmCommand):
    help = 'Held-out metrics for a dataset, a directory of replicates, or the ABC comparison'

    option_keys = {
        'data': 'io.data',
        'samples': 'io.samples',
        'bundle': 'io.bundle',
        'levels': 'evaluate.levels',
        'hdr_levels': 'evaluate.hdr_levels',
        'hdr_samples': 'evaluate.hdr_samples',
        'k_neighbors': 'evaluate.k_neighbors',
        'train': 'evaluate.train',
        'split': 'evaluate.split',
        'max_iterations': 'fit.max_iterations',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--data', type=str, default=None, help='Dataset CSV or a directory of them')
        parser.add_argument('--samples', type=str, default=None, help='Simulator samples for the ABC comparison')
        parser.add_argument('--bundle', type=str, default=None, help='Evaluate this fit instead of refitting')
        parser.add_argument('--levels', type=float, nargs='+', default=None, help='Pointwise coverage levels')
        parser.add_argument('--hdr-levels', type=float, nargs='+', default=None, help='Elliptical coverage levels')
        parser.add_argument('--hdr-samples', type=int, default=None, help='Draws per HDR threshold')
        parser.add_argument('--k-neighbors', type=int, default=None, help='ABC ensemble size')
        parser.add_argument('--train', type=int, default=None, help='Training series for the ABC comparison')
        parser.add_argument('--split', type=int, default=None, help='Observed prefix length')
        parser.add_argument('--max-iterations', type=int, default=None, help='SVI iterations per refit')
        parser.add_argument(
            '--clusters',
            action='store_true',
            help='Also report the adjusted Rand index against the true labels',
        )

    def run(self, config, options):
        bundle = read_bundle(self.require(config, 'bundle')) if config.io['bundle'] else None
        out = self.out_dir(config)
        if config.io['samples']:
            report = self.evaluate_samples(config, bundle)
            # One report per method, so summaries never pool the two
            for replicate in report.replicates:
                write_metrics(metrics.MetricsReport((replicate,)), out, stem=f'metrics_{replicate.name}')
            report.table().to_csv(out / 'comparison.csv', index=False, float_format=FLOAT_FORMAT)
            self.stdout.write(report.table().to_string(index=False))
        else:
            report = self.evaluate_datasets(config, bundle, options['clusters'])
            write_metrics(report, out)
            self.stdout.write(report.summary().to_string(index=False))
        self.success(f'Metrics of {len(report.replicates)} replicate(s) written to {out}')

    def dataset_paths(self, config):
        source = Path(self.require(config, 'data'))
        if not source.is_dir():
            return [source]
        paths = sorted(source.glob('*.csv'))
        if not paths:
            raise config_error(f"no dataset CSV files in {source}", path=str(source))
        return paths

    def fit_plugin(self, config, data, seed):
        basis = config.basis_spec(data.all_times())
        arch = config.architecture_for(basis.dimension)
        return fit(data, arch, config.fit_config(basis, seed)).plugin

    def evaluate_datasets(self, config, bundle, clusters):
        settings = config.evaluate
        paths = self.dataset_paths(config)
        seeds = replicate_seeds(config.seed, len(paths))
        reports, agreement = [], []
        for path, seed in zip(paths, seeds):
            transform = self.fitted_transform(bundle) if bundle else None
            data = self.load_dataset(config, str(path), transform)
            if not data.has_holdouts:
                raise DmlmmError(f"{path} has no held-out values", code=ErrorCode.NO_HOLDOUTS, path=str(path))
            plugin = bundle.plugin if bundle else self.fit_plugin(config, data, seed)
            predictions = metrics.predict_holdouts(plugin, data)
            reports.append(metrics.evaluate(predictions, settings['levels'], settings['hdr_levels'],
                                            path.stem, settings['hdr_samples'], seed))
            if clusters:
                agreement.append({'name': path.stem, 'ari': metrics.cluster_agreement(plugin, data)})
            self.stdout.write(f'{path}: {len(predictions)} subjects evaluated')
        if agreement:
            target = self.out_dir(config) / 'clusters_ari.csv'
            pd.DataFrame(agreement).to_csv(target, index=False, float_format=FLOAT_FORMAT)
            logger.info(f"Wrote cluster agreement to {target}")
        return metrics.MetricsReport.combine(reports)

    def evaluate_samples(self, config, bundle):
        settings = config.evaluate
        samples, _ = read_samples(self.require(config, 'samples'))
        train, test = split_samples(samples, settings['train'])
        if bundle:
            plugin = bundle.plugin
        else:
            plugin = self.fit_plugin(config, samples_to_dataset(train), config.seed)
        self.stdout.write(f'Comparing with ABC on {len(test)} test series...')
        return metrics.abc_benchmark(
            train, test, settings['split'], plugin, settings['k_neighbors'],
            settings['levels'], settings['hdr_levels'], settings['hdr_samples'], config.seed,
        )
