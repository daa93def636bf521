"""
Parameter containers for the DMFA prior and its hyperpriors.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from dmlmm.exceptions import ContractViolation
from .architecture import DmfaArchitecture, require_valid

WEIGHT_SUM_TOLERANCE = 1e-12


def tril_mask(rows: int, cols: int) -> np.ndarray:
    """True on and below the diagonal of a rows x cols loading."""
    return np.tri(rows, cols, dtype=bool)


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LayerParams:
    """
    One layer's components.

    weights (K,), means (K, p), loadings (K, p, q) lower triangular,
    noise (K, p) diagonal noise variances δ.
    """

    weights: np.ndarray
    means: np.ndarray
    loadings: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        means = np.asarray(self.means, dtype=float)
        loadings = np.asarray(self.loadings, dtype=float)
        noise = np.asarray(self.noise, dtype=float)
        count = weights.shape[0]
        if means.ndim != 2 or loadings.ndim != 3 or noise.shape != means.shape:
            raise ContractViolation("layer arrays have inconsistent ranks")
        if means.shape[0] != count or loadings.shape[:2] != means.shape:
            raise ContractViolation("layer arrays disagree on components or dimensions")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ContractViolation("layer weights must be nonnegative and sum to 1")
        if not np.all(noise > 0):
            raise ContractViolation("noise variances must be strictly positive")
        for array in (means, loadings, noise):
            if not np.all(np.isfinite(array)):
                raise ContractViolation("layer parameters must be finite")
        loadings = loadings * tril_mask(*loadings.shape[1:])
        object.__setattr__(self, 'weights', _frozen(weights))
        object.__setattr__(self, 'means', _frozen(means))
        object.__setattr__(self, 'loadings', _frozen(loadings))
        object.__setattr__(self, 'noise', _frozen(noise))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.means.shape[1]

    @property
    def factor_dim(self) -> int:
        return self.loadings.shape[2]


@dataclass(frozen=True, eq=False)
class DmfaParams:
    layers: Tuple[LayerParams, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ContractViolation("DMFA parameters need at least one layer")
        for upper, lower in zip(layers, layers[1:]):
            if upper.factor_dim != lower.input_dim:
                raise ContractViolation("adjacent layers disagree on the factor dimension")
        object.__setattr__(self, 'layers', layers)

    @property
    def architecture(self) -> DmfaArchitecture:
        return DmfaArchitecture(
            tuple(layer.n_components for layer in self.layers),
            tuple([self.layers[0].input_dim] + [layer.factor_dim for layer in self.layers]),
        )

    @property
    def dimension(self) -> int:
        return self.layers[0].input_dim

    @classmethod
    def build(cls, arch: DmfaArchitecture, weights, means, loadings, noise) -> 'DmfaParams':
        """Assemble from per-layer sequences and check them against the architecture."""
        require_valid(arch)
        layers = tuple(LayerParams(*fields) for fields in zip(weights, means, loadings, noise))
        params = cls(layers)
        if params.architecture != arch:
            raise ContractViolation(
                f"parameters have layout {params.architecture}, expected {arch}",
            )
        return params

    def to_dict(self) -> dict:
        from .serializers import DmfaParamsSerializer
        return dict(DmfaParamsSerializer(self).data)

    @classmethod
    def from_dict(cls, data: dict) -> 'DmfaParams':
        from .serializers import DmfaParamsSerializer
        serializer = DmfaParamsSerializer(data=data)
        if not serializer.is_valid():
            raise ContractViolation("invalid DMFA parameter document", errors=str(serializer.errors))
        return serializer.save()


@dataclass(frozen=True)
class PriorHyper:
    """Hyperprior scales; dirichlet=None means 1/K^(l) per layer."""

    mean_scale: float = 1.0
    noise_scale: float = 1.0
    horseshoe_scale: float = 1.0
    dirichlet: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        for name in ('mean_scale', 'noise_scale', 'horseshoe_scale'):
            if not float(getattr(self, name)) > 0:
                raise ContractViolation(f"{name} must be strictly positive")
        if self.dirichlet is not None:
            concentration = tuple(float(a) for a in self.dirichlet)
            if not all(a > 0 for a in concentration):
                raise ContractViolation("Dirichlet concentrations must be strictly positive")
            object.__setattr__(self, 'dirichlet', concentration)

    def concentration(self, arch: DmfaArchitecture) -> Tuple[float, ...]:
        if self.dirichlet is None:
            return tuple(1.0 / count for count in arch.components)
        if len(self.dirichlet) == 1:
            return self.dirichlet * arch.n_layers
        if len(self.dirichlet) != arch.n_layers:
            raise ContractViolation("one Dirichlet concentration per layer is required")
        return self.dirichlet


@dataclass(frozen=True, eq=False)
class LayerAuxiliary:
    """
    Inverse-gamma auxiliaries for one layer.

    noise_mixing (K, p): δ | ψ ~ IG(1/2, 1/ψ), ψ ~ IG(1/2, 1/A²).
    local_scales (K, p, q) λ² with mixing ν (K, p, q); global_scales (K,) τ²
    with mixing ξ (K,).
    """

    noise_mixing: np.ndarray
    local_scales: np.ndarray
    local_mixing: np.ndarray
    global_scales: np.ndarray
    global_mixing: np.ndarray

    def __post_init__(self):
        for name in ('noise_mixing', 'local_scales', 'local_mixing', 'global_scales', 'global_mixing'):
            array = np.asarray(getattr(self, name), dtype=float)
            if not np.all(array > 0) or not np.all(np.isfinite(array)):
                raise ContractViolation(f"auxiliary scale {name} must be strictly positive")
            object.__setattr__(self, name, _frozen(array))


@dataclass(frozen=True, eq=False)
class PriorAuxiliary:
    layers: Tuple[LayerAuxiliary, ...]

    @classmethod
    def unit(cls, arch: DmfaArchitecture) -> 'PriorAuxiliary':
        layers = []
        for layer in range(arch.n_layers):
            count, p, q = arch.layer_shape(layer)
            layers.append(LayerAuxiliary(
                np.ones((count, p)), np.ones((count, p, q)), np.ones((count, p, q)),
                np.ones(count), np.ones(count),
            ))
        return cls(tuple(layers))
