"""
Point-estimate (plug-in) parameters and predictive results.
"""
from dataclasses import dataclass
from typing import Union

import numpy as np

from basis.services import design
from basis.specs import BasisSpec
from dmlmm.exceptions import ContractViolation
from gmm.mixture import GaussianMixture

MARGINAL = 'marginal'


@dataclass(frozen=True, eq=False)
class PluginParams:
    """Random-effect mixture over β, noise variance σ̂² and the basis it lives in."""

    beta_prior: GaussianMixture
    sigma2: float
    basis: BasisSpec

    def __post_init__(self):
        if self.beta_prior.dimension != self.basis.dimension:
            raise ContractViolation(
                f"mixture dimension {self.beta_prior.dimension} differs from basis dimension "
                f"{self.basis.dimension}",
            )
        if not float(self.sigma2) > 0:
            raise ContractViolation("plug-in noise variance must be positive")
        object.__setattr__(self, 'sigma2', float(self.sigma2))

    def design(self, times) -> np.ndarray:
        return design(self.basis, times)

    def to_dict(self) -> dict:
        from .serializers import PluginParamsSerializer
        return dict(PluginParamsSerializer(self).data)

    @classmethod
    def from_dict(cls, data: dict) -> 'PluginParams':
        from .serializers import PluginParamsSerializer
        serializer = PluginParamsSerializer(data=data)
        if not serializer.is_valid():
            raise ContractViolation("invalid plug-in document", errors=str(serializer.errors))
        return serializer.save()


@dataclass(frozen=True, eq=False)
class PredictiveResult:
    mixture: GaussianMixture
    grid: np.ndarray
    provenance: Union[str, int] = MARGINAL

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).reshape(-1)
        if grid.shape[0] != self.mixture.dimension:
            raise ContractViolation("predictive grid length differs from the mixture dimension")
        if np.any(np.diff(grid) <= 0):
            raise ContractViolation("predictive grid must be strictly increasing")
        grid.setflags(write=False)
        object.__setattr__(self, 'grid', grid)

    @property
    def tilde_weights(self) -> np.ndarray:
        return self.mixture.weights

    @property
    def is_marginal(self) -> bool:
        return self.provenance == MARGINAL

    def to_dict(self) -> dict:
        return {
            'provenance': self.provenance,
            'grid': [float(t) for t in self.grid],
            'mixture': self.mixture.to_dict(),
        }


@dataclass(frozen=True)
class ConflictReport:
    """Tail probability of the prefix/suffix divergence check."""

    p: float
    G_observed: float
    n_prior_draws: int
    kl_se: float

    def to_dict(self) -> dict:
        from .serializers import ConflictReportSerializer
        return dict(ConflictReportSerializer(self).data)
