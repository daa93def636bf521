import numpy as np

from predict.services import (
    band_table, cdf_table, correlation_function, marginal_predictive, pointwise_band, predictive,
)
from simlab.io import FLOAT_FORMAT, write_json
from simlab.services import inverse_transform
from cli.base import DmlmmCommand
from cli.bundle import read_bundle
from cli.config import config_error


class Command(DmlmmCommand):
    help = 'Predictive bands and the predictive mixture for a subject, an external series or a new subject'

    option_keys = {
        'bundle': 'io.bundle',
        'data': 'io.data',
        'subject': 'predict.subject',
        'series': 'predict.series',
        'levels': 'predict.levels',
        'threshold': 'predict.threshold',
        'cdf_values': 'predict.cdf_values',
        'grid_points': 'predict.grid_points',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--bundle', type=str, default=None, help='Fit bundle (io.bundle)')
        parser.add_argument('--data', type=str, default=None, help='Dataset CSV holding --subject')
        parser.add_argument('--subject', type=str, default=None, help='Subject id in the dataset')
        parser.add_argument('--series', type=str, default=None, help='CSV with columns t, y')
        parser.add_argument('--levels', type=float, nargs='+', default=None, help='Band levels')
        parser.add_argument('--threshold', type=float, default=None, help='Adds P(y <= threshold)')
        parser.add_argument('--cdf-values', type=float, nargs='+', default=None,
                            help='Writes cdf.csv with the predictive CDF at these values')
        parser.add_argument('--grid-points', type=int, default=None, help='Grid size over the basis domain')

    def run(self, config, options):
        bundle = read_bundle(self.require(config, 'bundle'))
        plugin = bundle.plugin
        transform = self.fitted_transform(bundle)
        settings = config.predict
        grid = settings.get('grid')
        if not grid:
            grid = np.linspace(*bundle.basis.domain, settings['grid_points'])

        if settings['subject'] and settings['series']:
            raise config_error("predict.subject and predict.series are exclusive")
        if settings['subject']:
            # Observations go on the scale the bundle was fitted on
            data = self.load_dataset(config, transform=transform)
            subject = data.find(settings['subject'])
            result = predictive(plugin, subject.times, subject.values, grid, subject_id=subject.id)
        elif settings['series']:
            times, values = self.load_series(settings['series'], transform)
            result = predictive(plugin, times, values, grid, subject_id='series')
        else:
            result = marginal_predictive(plugin, grid)

        levels = settings['levels']
        table = band_table(result, levels[0], settings.get('threshold'))
        for level in levels[1:]:
            lower, upper = pointwise_band(result, level)
            table[f'lower_{level:g}'], table[f'upper_{level:g}'] = lower, upper
        if transform != 'identity':
            # The back-transform is monotone, so band endpoints map to band endpoints
            for column in [name for name in table.columns if name.startswith(('lower', 'upper'))]:
                table[f'{column}_original'] = inverse_transform(table[column], transform)

        out = self.out_dir(config)
        table.to_csv(out / 'predictions.csv', index=False, float_format=FLOAT_FORMAT)
        if settings.get('cdf_values'):
            cdf_table(result, settings['cdf_values']).to_csv(out / 'cdf.csv', index=False,
                                                             float_format=FLOAT_FORMAT)
        variance, _ = correlation_function(result)
        write_json(out / 'predictive.json', {
            **result.to_dict(),
            'levels': [float(level) for level in levels],
            'variance': [float(v) for v in variance],
            'transform': transform,
        })
        flag = ' (marginal)' if result.is_marginal else ''
        self.success(f'Predicted {len(result.grid)} grid points{flag}, written to {out}')
