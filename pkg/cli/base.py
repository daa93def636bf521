"""
Shared plumbing of the dmlmm management commands.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional

from django.core.management.base import BaseCommand

from dmlmm.exceptions import DmlmmError
from simlab.dataset import LongitudinalDataset
from simlab.io import read_dataset, read_series
from simlab.services import transform_series, transform_values
from .config import RunConfig, config_error, load_run_config

logger = logging.getLogger(__name__)


class DmlmmCommand(BaseCommand):
    """
    A command run from a RunConfig.

    Subclasses list their flags in add_command_arguments and map option
    names onto dotted config keys in option_keys; run() does the work.
    Library errors become one JSON line on stderr and the mapped exit code.
    """

    requires_system_checks = []
    option_keys: Dict[str, str] = {}

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, default=None, help='Run configuration INI file')
        parser.add_argument('--seed', type=int, default=None, help='Overrides seed')
        parser.add_argument('--threads', type=int, default=None, help='Overrides threads')
        parser.add_argument('--out', type=str, default=None, help='Output directory (overrides io.out)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            config = load_run_config(options['config'], self.overrides(options))
            self.run(config, options)
        except DmlmmError as err:
            logger.error(f"{self.command_name()} failed: {err.message}")
            self.stderr.style_func = None
            self.stderr.write(json.dumps(err.as_dict(), sort_keys=True))
            raise SystemExit(err.exit_code)

    def overrides(self, options) -> Dict:
        keys = {'seed': 'seed', 'threads': 'threads', 'out': 'io.out', **self.option_keys}
        return {key: options.get(name) for name, key in keys.items()}

    def run(self, config: RunConfig, options):
        raise NotImplementedError

    def command_name(self) -> str:
        return self.__class__.__module__.rsplit('.', 1)[-1]

    def out_dir(self, config: RunConfig) -> Path:
        path = Path(config.io['out'])
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, config: RunConfig, key: str) -> str:
        """A path-valued io key that must be set and exist."""
        value = config.io.get(key) or ''
        if not value:
            raise config_error(f"io.{key} is required for {self.command_name()}", key=f'io.{key}')
        if not Path(value).exists():
            raise config_error(f"io.{key} does not exist: {value}", key=f'io.{key}', path=value)
        return value

    def load_dataset(self, config: RunConfig, path: Optional[str] = None,
                     transform: Optional[str] = None) -> LongitudinalDataset:
        data = read_dataset(path or self.require(config, 'data'))
        return transform_values(data, transform or config.io['transform'])

    def fitted_transform(self, bundle) -> str:
        """The value transform the bundle was fitted with."""
        return bundle.config.get('io', {}).get('transform', 'identity')

    def load_series(self, path: str, transform: str):
        times, values = read_series(path)
        return times, transform_series(values, transform)

    def success(self, message: str):
        self.stdout.write(self.style.SUCCESS(message))
