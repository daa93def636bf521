"""
Variational state, fit configuration and per-subject design caches.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from basis.services import design
from basis.specs import BasisSpec
from dmfa.architecture import DmfaArchitecture
from dmfa.params import PriorHyper, tril_mask
from dmlmm.exceptions import ContractViolation
from simlab.dataset import LongitudinalDataset
from .factors import InverseGamma

DEFAULT_MINIBATCH = 64


@dataclass(frozen=True)
class FitConfig:
    basis: BasisSpec
    minibatch_size: Optional[int] = None
    max_iterations: int = 1000
    step_scale: float = 1.0
    step_delay: float = 10.0
    step_power: float = 0.75
    local_tolerance: float = 1e-6
    local_max_sweeps: int = 25
    seed: int = 0
    prune_threshold: float = 1e-3
    hyper: PriorHyper = field(default_factory=PriorHyper)
    ridge: float = 0.1
    threads: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.minibatch_size is not None and self.minibatch_size < 1:
            raise ContractViolation("minibatch_size must be at least 1")
        if self.max_iterations < 0:
            raise ContractViolation("max_iterations must be nonnegative")
        if not self.local_tolerance > 0 or self.local_max_sweeps < 1:
            raise ContractViolation("local tolerance must be positive and at least one sweep allowed")
        if not 0 <= self.prune_threshold < 1:
            raise ContractViolation("prune_threshold must lie in [0, 1)")
        if not (self.step_scale > 0 and self.step_delay >= 0 and self.step_power >= 0):
            raise ContractViolation("invalid step-size schedule")
        if not self.ridge > 0:
            raise ContractViolation("ridge must be positive")
        if self.threads < 1:
            raise ContractViolation("threads must be at least 1")

    def step_size(self, iteration: int) -> float:
        """a_m = s (m + τ)^(-κ), capped at 1."""
        return min(1.0, self.step_scale * (iteration + self.step_delay) ** (-self.step_power))

    def batch_size(self, n_subjects: int) -> int:
        size = min(n_subjects, DEFAULT_MINIBATCH) if self.minibatch_size is None else self.minibatch_size
        if size > n_subjects:
            raise ContractViolation(
                f"minibatch of {size} exceeds the {n_subjects} subjects in the dataset",
            )
        return size


@dataclass
class SubjectDesigns:
    """Stacked per-subject sufficient statistics of the regression layer."""

    designs: List[np.ndarray]
    values: List[np.ndarray]
    gram: np.ndarray        # (n, d, d) XᵀX
    cross: np.ndarray       # (n, d) Xᵀy
    sq_norm: np.ndarray     # (n,) yᵀy
    counts: np.ndarray      # (n,) n_i
    ids: List[str]

    @classmethod
    def build(cls, data: LongitudinalDataset, basis: BasisSpec) -> 'SubjectDesigns':
        data.require_observations()
        designs = [design(basis, subject.times) for subject in data]
        values = [np.asarray(subject.values, dtype=float) for subject in data]
        return cls(
            designs=designs,
            values=values,
            gram=np.stack([x.T @ x for x in designs]),
            cross=np.stack([x.T @ y for x, y in zip(designs, values)]),
            sq_norm=np.array([y @ y for y in values]),
            counts=np.array([y.shape[0] for y in values], dtype=float),
            ids=data.ids,
        )

    @property
    def n_subjects(self) -> int:
        return len(self.designs)

    @property
    def dimension(self) -> int:
        return self.gram.shape[1]


def as_designs(data, basis: BasisSpec) -> SubjectDesigns:
    if isinstance(data, SubjectDesigns):
        return data
    return SubjectDesigns.build(data, basis)


def coefficient_mask(input_dim: int, factor_dim: int) -> np.ndarray:
    """Active entries of each row's (μ_j, B_j·) coefficient vector."""
    return np.hstack([np.ones((input_dim, 1), dtype=bool), tril_mask(input_dim, factor_dim)])


@dataclass
class LayerFactors:
    """
    Global factors of one layer.

    Row j of component k has a joint Gaussian over (μ_kj, B_kj·) stored padded
    to 1 + q entries; inactive entries have zero mean and covariance.
    """

    coef_mean: np.ndarray           # (K, p, 1+q)
    coef_cov: np.ndarray            # (K, p, 1+q, 1+q)
    noise: InverseGamma             # δ (K, p)
    noise_mixing: InverseGamma      # (K, p)
    mean_scale: InverseGamma        # ν_μ (K, p)
    local_scale: InverseGamma       # λ² (K, p, q)
    local_mixing: InverseGamma      # (K, p, q)
    global_scale: InverseGamma      # τ² (K,)
    global_mixing: InverseGamma     # (K,)
    dirichlet: np.ndarray           # (K,)

    @property
    def n_components(self) -> int:
        return self.coef_mean.shape[0]

    @property
    def input_dim(self) -> int:
        return self.coef_mean.shape[1]

    @property
    def factor_dim(self) -> int:
        return self.coef_mean.shape[2] - 1

    @property
    def mask(self) -> np.ndarray:
        return coefficient_mask(self.input_dim, self.factor_dim)

    @property
    def loading_mask(self) -> np.ndarray:
        return self.mask[:, 1:]

    def second_moment(self) -> np.ndarray:
        """E[θθᵀ] per row, zero outside the active block."""
        return self.coef_cov + np.einsum('kjc,kjd->kjcd', self.coef_mean, self.coef_mean)

    def copy(self) -> 'LayerFactors':
        return LayerFactors(
            self.coef_mean.copy(), self.coef_cov.copy(),
            *(getattr(self, name).copy() for name in IG_FIELDS),
            self.dirichlet.copy(),
        )


IG_FIELDS = ('noise', 'noise_mixing', 'mean_scale', 'local_scale', 'local_mixing',
             'global_scale', 'global_mixing')


@dataclass
class VariationalState:
    """
    Global factors (σ², ψ and one LayerFactors per layer) and local factors:
    latent_mean[0] / latent_var[0] are q(β_i); entries 1..L are q(z_i^(l));
    resp holds r_i over paths in lexicographic order.
    """

    arch: DmfaArchitecture
    hyper: PriorHyper
    basis: BasisSpec
    sigma2: InverseGamma
    psi: InverseGamma
    layers: List[LayerFactors]
    latent_mean: List[np.ndarray]
    latent_var: List[np.ndarray]
    resp: np.ndarray
    subject_ids: List[str]
    iteration: int = 0

    def __post_init__(self):
        n = self.resp.shape[0]
        if self.resp.shape[1] != self.arch.n_paths:
            raise ContractViolation("responsibilities do not cover every path")
        if len(self.layers) != self.arch.n_layers or len(self.latent_mean) != self.arch.n_layers + 1:
            raise ContractViolation("state layers do not match the architecture")
        for level, dim in enumerate(self.arch.dims):
            if self.latent_mean[level].shape != (n, dim) or self.latent_var[level].shape != (n, dim):
                raise ContractViolation(f"latent factors at level {level} have the wrong shape")
        if self.basis.dimension != self.arch.input_dim:
            raise ContractViolation("basis dimension differs from the architecture input dimension")
        if len(self.subject_ids) != n:
            raise ContractViolation("state subject ids do not match the local factors")

    @property
    def n_subjects(self) -> int:
        return self.resp.shape[0]

    @property
    def beta_mean(self) -> np.ndarray:
        return self.latent_mean[0]

    @property
    def beta_var(self) -> np.ndarray:
        return self.latent_var[0]

    def layer_marginals(self, indices=None) -> List[np.ndarray]:
        """Per-layer component responsibilities ρ_l, each (n, K_l)."""
        resp = self.resp if indices is None else self.resp[indices]
        cube = resp.reshape((resp.shape[0],) + self.arch.components)
        axes = range(1, self.arch.n_layers + 1)
        return [cube.sum(axis=tuple(a for a in axes if a != layer + 1)) for layer in range(self.arch.n_layers)]

    def copy(self) -> 'VariationalState':
        return VariationalState(
            arch=self.arch,
            hyper=self.hyper,
            basis=self.basis,
            sigma2=self.sigma2.copy(),
            psi=self.psi.copy(),
            layers=[layer.copy() for layer in self.layers],
            latent_mean=[m.copy() for m in self.latent_mean],
            latent_var=[v.copy() for v in self.latent_var],
            resp=self.resp.copy(),
            subject_ids=list(self.subject_ids),
            iteration=self.iteration,
        )

    def to_dict(self) -> dict:
        from .serializers import VariationalStateSerializer
        return dict(VariationalStateSerializer(self).data)

    @classmethod
    def from_dict(cls, data: dict) -> 'VariationalState':
        from .serializers import VariationalStateSerializer
        serializer = VariationalStateSerializer(data=data)
        if not serializer.is_valid():
            raise ContractViolation("invalid variational state document", errors=str(serializer.errors))
        return serializer.save()


@dataclass
class FitResult:
    state: VariationalState
    elbo_trace: np.ndarray
    plugin: object
    diagnostics: dict = field(default_factory=dict)
