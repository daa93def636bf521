"""
Fit bundles: everything a later predict, evaluate or resumed fit needs.

bundle.json holds the architecture, basis, plug-in estimate, full variational
state, diagnostics and the run configuration; elbo.csv holds the trace.
Wall time is left out of the bundle so repeated runs write identical files.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from basis.specs import BasisSpec
from dmfa.architecture import DmfaArchitecture
from dmfa.serializers import DmfaArchitectureSerializer
from dmlmm.exceptions import DmlmmError, InputError
from predict.plugin import PluginParams
from simlab.io import FLOAT_FORMAT, read_json, write_json
from vi.state import FitResult, VariationalState
from .serializers import FitBundleSerializer

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = 'dmlmm-fit'
BUNDLE_VERSION = 1
BUNDLE_FILE = 'bundle.json'
ELBO_FILE = 'elbo.csv'
# Diagnostics that differ between otherwise identical runs
VOLATILE_DIAGNOSTICS = ('wall_time',)


@dataclass
class FitBundle:
    architecture: DmfaArchitecture
    basis: BasisSpec
    plugin: PluginParams
    state: VariationalState
    diagnostics: Dict
    elbo_trace: np.ndarray
    config: Dict = field(default_factory=dict)

    @classmethod
    def from_result(cls, result: FitResult, arch: DmfaArchitecture, config: Dict) -> 'FitBundle':
        diagnostics = {k: v for k, v in result.diagnostics.items() if k not in VOLATILE_DIAGNOSTICS}
        return cls(arch, result.state.basis, result.plugin, result.state, diagnostics,
                   np.asarray(result.elbo_trace, dtype=float), config)

    def to_dict(self) -> dict:
        return {
            'format': BUNDLE_FORMAT,
            'version': BUNDLE_VERSION,
            'architecture': DmfaArchitectureSerializer(self.architecture).data,
            'basis': self.basis.to_dict(),
            'plugin': self.plugin.to_dict(),
            'state': self.state.to_dict(),
            'diagnostics': self.diagnostics,
            'config': self.config,
            'elbo_trace': [float(v) for v in self.elbo_trace],
        }


def write_bundle(bundle: FitBundle, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle_path, trace_path = out_dir / BUNDLE_FILE, out_dir / ELBO_FILE
    write_json(bundle_path, bundle.to_dict())
    trace = pd.DataFrame({
        'iteration': np.arange(1, bundle.elbo_trace.shape[0] + 1) + _first_iteration(bundle),
        'elbo': bundle.elbo_trace,
    })
    trace.to_csv(trace_path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Wrote fit bundle to {bundle_path}")
    return [bundle_path, trace_path]


def _first_iteration(bundle: FitBundle) -> int:
    return int(bundle.state.iteration) - bundle.elbo_trace.shape[0]


def read_bundle(path) -> FitBundle:
    """A bundle from bundle.json or the directory holding it."""
    path = Path(path)
    if path.is_dir():
        path = path / BUNDLE_FILE
    serializer = FitBundleSerializer(data=read_json(path))
    if not serializer.is_valid():
        raise InputError(f"{path} is not a fit bundle", path=str(path), errors=str(serializer.errors))
    data = serializer.validated_data
    architecture = DmfaArchitectureSerializer(data=data['architecture'])
    if not architecture.is_valid():
        raise InputError(f"{path}: invalid architecture", path=str(path), errors=str(architecture.errors))
    try:
        bundle = FitBundle(
            architecture=architecture.save(),
            basis=BasisSpec.from_dict(data['basis']),
            plugin=PluginParams.from_dict(data['plugin']),
            state=VariationalState.from_dict(data['state']),
            diagnostics=dict(data['diagnostics']),
            elbo_trace=np.asarray(data['elbo_trace'], dtype=float),
            config=dict(data['config']),
        )
    except DmlmmError as err:
        raise InputError(f"{path}: {err.message}", path=str(path))
    if bundle.state.arch != bundle.architecture:
        raise InputError(f"{path}: state and architecture disagree", path=str(path))
    logger.debug(f"Read fit bundle {path} ({bundle.architecture})")
    return bundle
