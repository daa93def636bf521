from predict.services import conflict_tail_probability
from simlab.io import write_json
from cli.base import DmlmmCommand
from cli.bundle import read_bundle
from cli.config import config_error


class Command(DmlmmCommand):
    help = 'Prior-data conflict check of a series prefix against the fitted model'

    option_keys = {
        'bundle': 'io.bundle',
        'data': 'io.data',
        'subject': 'predict.subject',
        'series': 'predict.series',
        'split': 'conflict.split',
        'prior_draws': 'conflict.prior_draws',
        'kl_samples': 'conflict.kl_samples',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--bundle', type=str, default=None, help='Fit bundle (io.bundle)')
        parser.add_argument('--data', type=str, default=None, help='Dataset CSV holding --subject')
        parser.add_argument('--subject', type=str, default=None, help='Subject id in the dataset')
        parser.add_argument('--series', type=str, default=None, help='CSV with columns t, y')
        parser.add_argument('--split', type=int, default=None, help='Prefix length t')
        parser.add_argument('--prior-draws', type=int, default=None, help='Reference prefixes from the prior')
        parser.add_argument('--kl-samples', type=int, default=None, help='Draws per KL estimate')

    def run(self, config, options):
        bundle = read_bundle(self.require(config, 'bundle'))
        settings = config.conflict
        if settings.get('split') is None:
            raise config_error("conflict.split is required", key='conflict.split')

        if config.predict['series']:
            times, values = self.load_series(config.predict['series'], self.fitted_transform(bundle))
        elif config.predict['subject']:
            subject = self.load_dataset(config, transform=self.fitted_transform(bundle)).find(config.predict['subject'])
            times, values = subject.times, subject.values
        else:
            raise config_error("conflict needs predict.series or predict.subject")

        report = conflict_tail_probability(
            bundle.plugin, times, values, settings['split'],
            settings['prior_draws'], settings['kl_samples'], seed=config.seed,
        )
        out = self.out_dir(config)
        write_json(out / 'conflict.json', report.to_dict())
        self.success(f'Conflict check: p = {report.p:.4g} (G = {report.G_observed:.4g}), written to {out}')
