from simlab.blackbox import exceeds_cases, seasonal_generator, simulate_blackbox
from simlab.generators import generate
from simlab.io import write_dataset, write_samples
from simlab.serializers import DatasetSidecarSerializer
from simlab.services import replicate_seeds
from cli.base import DmlmmCommand

BLACKBOX = 'blackbox'


class Command(DmlmmCommand):
    help = 'Simulate datasets from dgp1, dgp2, dgp3 or the black-box seasonal generator'

    option_keys = {
        'generator': 'simulate.generator',
        'subjects': 'simulate.subjects',
        'holdout': 'simulate.holdout',
        'replicates': 'simulate.replicates',
        'count': 'simulate.count',
        'length': 'simulate.length',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--generator', type=str, default=None, help='dgp1, dgp2, dgp3 or blackbox')
        parser.add_argument('--subjects', type=int, default=None, help='Subjects (rows for dgp3)')
        parser.add_argument('--holdout', type=int, default=None, help='Held-out points per subject (dgp1, dgp2)')
        parser.add_argument('--replicates', type=int, default=None, help='Independent datasets to draw')
        parser.add_argument('--count', type=int, default=None, help='Black-box series to keep')
        parser.add_argument('--length', type=int, default=None, help='Black-box series length')

    def run(self, config, options):
        settings = config.simulate
        name = settings['generator']
        replicates = settings['replicates']
        seeds = replicate_seeds(config.seed, replicates) if replicates > 1 else [config.seed]
        out = self.out_dir(config)

        for replicate, seed in enumerate(seeds):
            stem = name if replicates == 1 else f'{name}_{replicate:03d}'
            path = out / f'{stem}.csv'
            if name == BLACKBOX:
                self.simulate_blackbox(settings, seed, path)
                continue
            data = generate(name, seed, **self.generator_options(name, settings))
            sidecar = DatasetSidecarSerializer({
                'generator': name,
                'seed': seed,
                'params': dict(data.metadata.get('params', {}), replicate=replicate, base_seed=config.seed),
                'n_subjects': len(data),
            }).data
            write_dataset(data, path, sidecar=dict(sidecar))
            self.stdout.write(f'{path}: {len(data)} subjects (seed {seed})')
        self.success(f'Simulated {replicates} {name} replicate(s) into {out}')

    def generator_options(self, name, settings):
        options = {}
        if settings.get('subjects'):
            options['n_rows' if name == 'dgp3' else 'n_subjects'] = settings['subjects']
        if name != 'dgp3':
            options['n_holdout'] = settings['holdout']
        return options

    def simulate_blackbox(self, settings, seed, path):
        generator = seasonal_generator(settings['length'], settings['period'])
        predicate = exceeds_cases(settings['case_threshold']) if settings['reject'] else None
        samples = simulate_blackbox(generator, settings['count'], seed, predicate)
        write_samples(samples, path, BLACKBOX, seed)
        self.stdout.write(f'{path}: {len(samples)} series (seed {seed})')
