"""
Layer layout of a deep mixture of factor analyzers.
"""
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from dmlmm.exceptions import ContractViolation

# Upper bound on the number of collapsed components
MAX_PATHS = 10 ** 6


@dataclass(frozen=True)
class DmfaArchitecture:
    """
    components: (K^(1), ..., K^(L)) components per layer.
    dims: (D^(0), ..., D^(L)) latent dimensions, D^(0) the random-effect dimension.
    """

    components: Tuple[int, ...]
    dims: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'components', tuple(int(k) for k in self.components))
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))

    @property
    def n_layers(self) -> int:
        return len(self.components)

    @property
    def n_paths(self) -> int:
        return math.prod(self.components)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def layer_shape(self, layer: int) -> Tuple[int, int, int]:
        """(K, p, q) for a 0-based layer: components, input and factor dimension."""
        return self.components[layer], self.dims[layer], self.dims[layer + 1]

    def __str__(self):
        return f"K={self.components} D={self.dims}"


@dataclass
class ValidationReport:
    violations: List[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, layer, message):
        self.violations.append({'layer': layer, 'message': message})

    def __bool__(self):
        return self.ok


def validate(arch: DmfaArchitecture) -> ValidationReport:
    """
    Check the layout, including the Anderson-Rubin condition
    D^(l+1) <= (D^(l) - 1) / 2 for every layer.
    """
    report = ValidationReport()
    if arch.n_layers < 1:
        report.add(None, "at least one layer is required")
        return report
    if len(arch.dims) != arch.n_layers + 1:
        report.add(None, f"{arch.n_layers} layers need {arch.n_layers + 1} dimensions, got {len(arch.dims)}")
        return report
    for layer, count in enumerate(arch.components, start=1):
        if count < 1:
            report.add(layer, f"layer {layer} needs at least one component")
    for layer, dim in enumerate(arch.dims):
        if dim < 1:
            report.add(layer, f"dimension D^({layer}) must be at least 1")
    for layer in range(arch.n_layers):
        upper, lower = arch.dims[layer], arch.dims[layer + 1]
        if 2 * lower > upper - 1:
            report.add(
                layer + 1,
                f"D^({layer + 1})={lower} exceeds (D^({layer})-1)/2={(upper - 1) / 2:g}",
            )
    if report.ok and arch.n_paths > MAX_PATHS:
        report.add(None, f"{arch.n_paths} paths exceed the supported maximum of {MAX_PATHS}")
    return report


def require_valid(arch: DmfaArchitecture) -> DmfaArchitecture:
    report = validate(arch)
    if not report.ok:
        raise ContractViolation(
            f"invalid architecture {arch}", violations=report.violations,
        )
    return arch


def enumerate_paths(arch: DmfaArchitecture) -> List[Tuple[int, ...]]:
    """All (k_1, ..., k_L) in lexicographic order."""
    return list(itertools.product(*(range(count) for count in arch.components)))


def parse_architecture(components: Sequence[int], dims: Sequence[int]) -> DmfaArchitecture:
    return require_valid(DmfaArchitecture(tuple(components), tuple(dims)))
