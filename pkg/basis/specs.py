"""
Basis specifications and evaluated design matrices.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from dmlmm.exceptions import ContractViolation

DEFAULT_DEGREE = 3
# Relative margin added on both sides of an inferred domain
DOMAIN_MARGIN = 1e-6


class BasisFamily(str, Enum):
    LEGENDRE = 'legendre'
    BSPLINE = 'bspline'
    SEASONAL_BSPLINE = 'seasonal_bspline'
    COMPOSITE = 'composite'

    @classmethod
    def choices(cls):
        return [(member.value, member.name.replace('_', ' ').title()) for member in cls]


def infer_domain(times) -> Tuple[float, float]:
    """[min t, max t] over the observed times, widened by a 1e-6 relative margin."""
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0 or not np.all(np.isfinite(times)):
        raise ContractViolation("cannot infer a basis domain from empty or non-finite times")
    lo, hi = float(times.min()), float(times.max())
    span = hi - lo
    margin = DOMAIN_MARGIN * (span if span > 0 else max(1.0, abs(lo)))
    return lo - margin, hi + margin


def uniform_knots(dimension: int, degree: int, domain: Tuple[float, float]) -> np.ndarray:
    """Clamped knot vector with uniform interior knots."""
    lo, hi = domain
    n_interior = dimension - degree - 1
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """
    A basis B(t) of the given family and dimension.

    Splines carry a degree and a clamped knot vector (uniform when not
    given); seasonal blocks carry a period; composites carry their parts.
    """

    family: BasisFamily
    dimension: int
    domain: Tuple[float, float]
    degree: int = DEFAULT_DEGREE
    knots: Optional[np.ndarray] = None
    period: Optional[float] = None
    parts: Tuple['BasisSpec', ...] = field(default_factory=tuple)

    def __post_init__(self):
        try:
            family = BasisFamily(self.family)
        except ValueError:
            raise ContractViolation(f"unknown basis family {self.family!r}")
        object.__setattr__(self, 'family', family)
        object.__setattr__(self, 'parts', tuple(self.parts))

        if family == BasisFamily.COMPOSITE:
            self._check_composite()
        lo, hi = (float(v) for v in self.domain)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ContractViolation(f"basis domain ({lo}, {hi}) is degenerate")
        object.__setattr__(self, 'domain', (lo, hi))
        if int(self.dimension) < 1:
            raise ContractViolation("basis dimension must be at least 1")
        object.__setattr__(self, 'dimension', int(self.dimension))

        if family == BasisFamily.BSPLINE:
            self._check_spline()
        elif family == BasisFamily.SEASONAL_BSPLINE:
            self._check_seasonal()

    def _check_composite(self):
        if not self.parts:
            raise ContractViolation("a composite basis needs at least one part")
        if any(part.family == BasisFamily.COMPOSITE for part in self.parts):
            raise ContractViolation("composite bases cannot be nested")
        total = sum(part.dimension for part in self.parts)
        if total != int(self.dimension):
            raise ContractViolation(
                f"composite parts have {total} columns, spec declares {self.dimension}",
            )

    def _check_spline(self):
        degree = int(self.degree)
        if degree < 0:
            raise ContractViolation("spline degree must be nonnegative")
        if self.dimension < degree + 1:
            raise ContractViolation(
                f"a degree-{degree} spline needs at least {degree + 1} basis functions",
            )
        object.__setattr__(self, 'degree', degree)
        if self.knots is None:
            knots = uniform_knots(self.dimension, degree, self.domain)
        else:
            knots = np.asarray(self.knots, dtype=float).reshape(-1)
        if knots.shape[0] != self.dimension + degree + 1:
            raise ContractViolation(
                f"knot vector has {knots.shape[0]} entries, expected {self.dimension + degree + 1}",
            )
        if np.any(np.diff(knots) < 0) or not np.all(np.isfinite(knots)):
            raise ContractViolation("knot vector must be finite and nondecreasing")
        lo, hi = self.domain
        head, tail = knots[:degree + 1], knots[-(degree + 1):]
        if np.any(head != lo) or np.any(tail != hi):
            raise ContractViolation(
                f"knot vector must repeat each domain boundary {degree + 1} times",
            )
        if np.any(knots[degree + 1:-(degree + 1)] >= hi) or np.any(knots[degree + 1:-(degree + 1)] <= lo):
            raise ContractViolation("interior knots must lie strictly inside the domain")
        knots.setflags(write=False)
        object.__setattr__(self, 'knots', knots)

    def _check_seasonal(self):
        degree = int(self.degree)
        if self.period is None or not float(self.period) > 0:
            raise ContractViolation("seasonal period must be positive")
        if degree < 0 or self.dimension < degree + 1:
            raise ContractViolation(
                f"a degree-{degree} seasonal block needs at least {degree + 1} columns",
            )
        object.__setattr__(self, 'degree', degree)
        object.__setattr__(self, 'period', float(self.period))

    @classmethod
    def legendre(cls, dimension: int, domain) -> 'BasisSpec':
        return cls(BasisFamily.LEGENDRE, dimension, tuple(domain))

    @classmethod
    def bspline(cls, dimension: int, domain, degree: int = DEFAULT_DEGREE, knots=None) -> 'BasisSpec':
        return cls(BasisFamily.BSPLINE, dimension, tuple(domain), degree=degree, knots=knots)

    @classmethod
    def seasonal(cls, dimension: int, period: float, degree: int = DEFAULT_DEGREE,
                 domain=None) -> 'BasisSpec':
        domain = (0.0, float(period)) if domain is None else tuple(domain)
        return cls(BasisFamily.SEASONAL_BSPLINE, dimension, domain, degree=degree, period=period)

    @classmethod
    def composite(cls, parts: Sequence['BasisSpec']) -> 'BasisSpec':
        parts = tuple(parts)
        if not parts:
            raise ContractViolation("a composite basis needs at least one part")
        domain = (min(p.domain[0] for p in parts), max(p.domain[1] for p in parts))
        return cls(BasisFamily.COMPOSITE, sum(p.dimension for p in parts), domain, parts=parts)

    def knot_list(self) -> list:
        """Knot vector as a JSON array; empty for families without knots."""
        return [] if self.knots is None else [float(k) for k in self.knots]

    def to_dict(self) -> dict:
        from .serializers import BasisSpecSerializer
        return dict(BasisSpecSerializer(self).data)

    @classmethod
    def from_dict(cls, data: dict) -> 'BasisSpec':
        from .serializers import BasisSpecSerializer
        serializer = BasisSpecSerializer(data=data)
        if not serializer.is_valid():
            raise ContractViolation("invalid basis document", errors=str(serializer.errors))
        return serializer.save()


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Rows B(t_j)ᵀ for each evaluation time."""

    values: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        times = np.array(self.times, dtype=float).reshape(-1)
        if values.ndim != 2 or values.shape[0] != times.shape[0]:
            raise ContractViolation("design matrix needs one row per evaluation time")
        values.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'times', times)

    @property
    def shape(self):
        return self.values.shape

    def columns(self, start: int, stop: int) -> 'DesignMatrix':
        return DesignMatrix(self.values[:, start:stop], self.times)
