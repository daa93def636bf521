from dmfa.serializers import DmfaArchitectureSerializer
from simlab.io import write_json
from vi.services import best_candidate, score_architectures
from cli.base import DmlmmCommand


class Command(DmlmmCommand):
    help = 'Score candidate architectures by short fits and pick the best'

    option_keys = {
        'data': 'io.data',
        'candidates': 'architecture.candidates',
        'short_iterations': 'fit.short_iterations',
    }

    def add_command_arguments(self, parser):
        parser.add_argument('--data', type=str, default=None, help='Dataset CSV (io.data)')
        parser.add_argument('--candidates', type=str, default=None,
                            help='Semicolon-separated components/factor_dims, e.g. "4,2/4,1; 6/3"')
        parser.add_argument('--short-iterations', type=int, default=None, help='Iterations per candidate')

    def run(self, config, options):
        data = self.load_dataset(config)
        basis = config.basis_spec(data.all_times())
        candidates = config.candidates_for(basis.dimension)
        self.stdout.write(f'Scoring {len(candidates)} candidate architecture(s)...')
        scores = score_architectures(data, candidates, config.fit['short_iterations'],
                                     config.fit_config(basis))
        best = best_candidate(scores)

        out = self.out_dir(config)
        write_json(out / 'selection.json', {
            'selected': DmfaArchitectureSerializer(best).data,
            'short_iterations': config.fit['short_iterations'],
            'candidates': [
                {'architecture': DmfaArchitectureSerializer(arch).data, 'score': score, 'error': message}
                for arch, score, message in scores
            ],
        })
        self.success(f'Selected {best}, written to {out}')
