import logging

import numpy as np
import pandas as pd

from predict.services import cluster_assign
from simlab.io import FLOAT_FORMAT, format_label
from vi.services import fit
from cli.base import DmlmmCommand
from cli.bundle import FitBundle, read_bundle, write_bundle

logger = logging.getLogger(__name__)


class Command(DmlmmCommand):
    help = 'Fit a deep mixture of linear mixed models to a long-format dataset'

    option_keys = {
        'data': 'io.data',
        'transform': 'io.transform',
        'max_iterations': 'fit.max_iterations',
        'minibatch_size': 'fit.minibatch_size',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--data', type=str, default=None, help='Dataset CSV (io.data)')
        parser.add_argument('--transform', type=str, default=None, help='identity, probit or log')
        parser.add_argument('--max-iterations', type=int, default=None, help='SVI iterations')
        parser.add_argument('--minibatch-size', type=int, default=None, help='Subjects per iteration')
        parser.add_argument(
            '--resume',
            type=str,
            default=None,
            help='Bundle (or its directory) to continue fitting from',
        )

    def run(self, config, options):
        previous = read_bundle(options['resume']) if options['resume'] else None
        data = self.load_dataset(config, transform=self.fitted_transform(previous) if previous else None)
        if previous is not None:
            arch, basis, state = previous.architecture, previous.basis, previous.state
            self.stdout.write(f'Resuming {arch} from iteration {state.iteration}')
        else:
            basis = config.basis_spec(data.all_times())
            arch, state = config.architecture_for(basis.dimension), None

        self.stdout.write(f'Fitting {arch} to {len(data)} subjects...')
        result = fit(data, arch, config.fit_config(basis), state)
        if previous is not None:
            result.elbo_trace = np.concatenate([previous.elbo_trace, result.elbo_trace])

        out = self.out_dir(config)
        write_bundle(FitBundle.from_result(result, arch, config.to_dict()), out)
        self.write_clusters(result.plugin, data, out / 'clusters.csv')
        kept = result.plugin.beta_prior.n_components
        self.success(f'Fit finished: {result.state.iteration} iterations, {kept} components kept, '
                     f'bundle in {out}')

    def write_clusters(self, plugin, data, path):
        rows = []
        for subject in data:
            cluster, weights = cluster_assign(plugin, subject.times, subject.values)
            row = {'subject_id': subject.id, 'cluster': cluster}
            row.update({f'p{k}': w for k, w in enumerate(weights)})
            if data.labels is not None:
                row['label'] = format_label(subject.label)
            rows.append(row)
        pd.DataFrame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        logger.info(f"Wrote cluster assignments of {len(rows)} subjects to {path}")
