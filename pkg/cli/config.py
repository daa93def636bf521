"""
Run configuration: one INI file with a [settings] section of dotted keys.

    [settings]
    seed = 7
    basis.family = legendre
    basis.dimension = 10
    architecture.components = 4, 2
    architecture.factor_dims = 4, 1
    fit.max_iterations = 1000

Keys are read from the file repository directly, so environment variables
never change a run. Command-line flags override keys.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from decouple import Csv, RepositoryIni

from basis.specs import BasisFamily, BasisSpec, infer_domain
from dmfa.architecture import DmfaArchitecture, parse_architecture
from dmfa.params import PriorHyper
from dmlmm.exceptions import DmlmmError, ErrorCode
from vi.state import FitConfig
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)

SECTIONS = ('basis', 'architecture', 'fit', 'prior', 'io', 'predict', 'simulate', 'conflict', 'evaluate')
TOP_LEVEL = ('seed', 'threads')
LIST_KEYS = {
    'basis.domain', 'architecture.components', 'architecture.factor_dims', 'prior.dirichlet',
    'predict.grid', 'predict.levels', 'predict.cdf_values', 'evaluate.levels', 'evaluate.hdr_levels',
}
# Keys whose empty value means "not set"
OPTIONAL_KEYS = {'basis.domain', 'basis.period', 'prior.dirichlet', 'predict.grid', 'predict.threshold',
                 'predict.cdf_values', 'simulate.subjects', 'conflict.split'}


def config_error(message: str, **detail) -> DmlmmError:
    return DmlmmError(message, code=ErrorCode.INVALID_CONFIG, **detail)


def read_settings(path) -> Dict[str, str]:
    """Raw key/value strings of the [settings] section."""
    path = Path(path)
    if not path.exists():
        raise config_error(f"config file not found: {path}", path=str(path))
    try:
        repository = RepositoryIni(str(path))
    except Exception as err:
        raise config_error(f"cannot parse {path}: {err}", path=str(path))
    parser = repository.parser
    if not parser.has_section(repository.SECTION):
        raise config_error(f"{path} has no [{repository.SECTION}] section", path=str(path))
    return {key: repository[key] for key in parser.options(repository.SECTION)}


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {section: {} for section in SECTIONS}
    for key, value in flat.items():
        if key in LIST_KEYS and isinstance(value, str):
            value = Csv()(value)
        if key in OPTIONAL_KEYS and value in ('', [], None):
            continue
        if key in TOP_LEVEL:
            nested[key] = value
            continue
        section, _, name = key.partition('.')
        if section not in SECTIONS or not name:
            raise config_error(f"unknown config key {key!r}", key=key)
        nested[section][name] = value
    return nested


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration, grouped by section."""

    seed: int
    threads: int
    basis: Dict[str, Any]
    architecture: Dict[str, Any]
    fit: Dict[str, Any]
    prior: Dict[str, Any]
    io: Dict[str, Any]
    predict: Dict[str, Any]
    simulate: Dict[str, Any]
    conflict: Dict[str, Any]
    evaluate: Dict[str, Any]

    def basis_spec(self, times=None) -> BasisSpec:
        """The configured basis; without basis.domain the domain is inferred from times."""
        options = self.basis
        domain = options.get('domain')
        if domain is None:
            if times is None:
                raise config_error("basis.domain is not set and there are no data to infer it from")
            domain = infer_domain(times)
        family = BasisFamily(options['family'])
        dimension, degree = options['dimension'], options['degree']
        if family == BasisFamily.LEGENDRE:
            return BasisSpec.legendre(dimension, domain)
        if family == BasisFamily.BSPLINE:
            return BasisSpec.bspline(dimension, domain, degree)
        if family == BasisFamily.SEASONAL_BSPLINE:
            return BasisSpec.seasonal(dimension, options['period'], degree, domain)
        seasonal = options['seasonal_dimension']
        return BasisSpec.composite([
            BasisSpec.bspline(dimension - seasonal, domain, degree),
            BasisSpec.seasonal(seasonal, options['period'], degree, domain),
        ])

    def architecture_for(self, dimension: int) -> DmfaArchitecture:
        return parse_architecture(self.architecture['components'],
                                  (dimension,) + tuple(self.architecture['factor_dims']))

    def candidates_for(self, dimension: int) -> List[DmfaArchitecture]:
        """architecture.candidates, or the single configured architecture."""
        text = self.architecture.get('candidates', '').strip()
        if not text:
            return [self.architecture_for(dimension)]
        candidates = []
        for entry in filter(None, (part.strip() for part in text.split(';'))):
            components, sep, dims = entry.partition('/')
            try:
                components = tuple(int(v) for v in Csv()(components))
                dims = tuple(int(v) for v in Csv()(dims))
            except ValueError:
                raise config_error(f"malformed architecture candidate {entry!r}", candidate=entry)
            if not sep or len(components) != len(dims):
                raise config_error(f"candidate {entry!r} must read components/factor_dims of equal length",
                                   candidate=entry)
            candidates.append(parse_architecture(components, (dimension,) + dims))
        return candidates

    def prior_hyper(self) -> PriorHyper:
        dirichlet = self.prior.get('dirichlet')
        return PriorHyper(
            mean_scale=self.prior['mean_scale'],
            noise_scale=self.prior['noise_scale'],
            horseshoe_scale=self.prior['horseshoe_scale'],
            dirichlet=tuple(dirichlet) if dirichlet else None,
        )

    def fit_config(self, basis: BasisSpec, seed: Optional[int] = None) -> FitConfig:
        options = self.fit
        return FitConfig(
            basis=basis,
            minibatch_size=options['minibatch_size'] or None,
            max_iterations=options['max_iterations'],
            step_scale=options['step_scale'],
            step_delay=options['step_delay'],
            step_power=options['step_power'],
            local_tolerance=options['local_tolerance'],
            local_max_sweeps=options['local_max_sweeps'],
            seed=self.seed if seed is None else seed,
            prune_threshold=options['prune_threshold'],
            hyper=self.prior_hyper(),
            ridge=options['ridge'],
            threads=self.threads,
            log_every=options['log_every'],
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps({
            name: getattr(self, name) for name in TOP_LEVEL + SECTIONS
        }))


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Settings from the file at path (if any) with overrides applied on top,
    validated section by section.
    """
    flat: Dict[str, Any] = read_settings(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    serializer = RunConfigSerializer(data=_nest(flat))
    if not serializer.is_valid():
        raise config_error("invalid run configuration", errors=json.dumps(serializer.errors, sort_keys=True))
    data = serializer.validated_data
    logger.debug(f"Run configuration loaded from {path or 'defaults'}")
    return RunConfig(**{name: _plain(data[name]) for name in TOP_LEVEL + SECTIONS})


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(v) for key, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value
