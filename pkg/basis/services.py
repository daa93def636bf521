"""
Design-matrix evaluation for every basis family.
"""
import logging

import numpy as np
from scipy.interpolate import BSpline

from dmlmm.exceptions import ContractViolation
from .specs import BasisFamily, BasisSpec, DesignMatrix

logger = logging.getLogger(__name__)

# Absolute slack (relative to the domain width) for times at the domain edges
EDGE_TOLERANCE = 1e-9


def _as_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(times))
    if bad.size:
        raise ContractViolation(f"time at index {bad[0]} is not finite", index=int(bad[0]))
    return times


def _require(spec: BasisSpec, family: BasisFamily):
    if spec.family != family:
        raise ContractViolation(f"expected a {family.value} basis, got {spec.family.value}")


def _clip_to_domain(spec: BasisSpec, times: np.ndarray) -> np.ndarray:
    """Clamp times within the edge tolerance; anything further out is an error."""
    lo, hi = spec.domain
    slack = EDGE_TOLERANCE * max(1.0, hi - lo)
    outside = np.flatnonzero((times < lo - slack) | (times > hi + slack))
    if outside.size:
        index = int(outside[0])
        raise ContractViolation(
            f"time {times[index]!r} at index {index} lies outside the basis domain ({lo}, {hi})",
            index=index,
        )
    return np.clip(times, lo, hi)


def eval_legendre(spec: BasisSpec, times) -> DesignMatrix:
    """Legendre polynomials P_0..P_{d-1} of the times mapped affinely onto [-1, 1]."""
    _require(spec, BasisFamily.LEGENDRE)
    times = _as_times(times)
    lo, hi = spec.domain
    x = 2.0 * (_clip_to_domain(spec, times) - lo) / (hi - lo) - 1.0
    return DesignMatrix(np.polynomial.legendre.legvander(x, spec.dimension - 1), times)


def eval_bspline(spec: BasisSpec, times) -> DesignMatrix:
    """Clamped B-spline basis on the spec's knot vector."""
    _require(spec, BasisFamily.BSPLINE)
    times = _as_times(times)
    if times.size == 0:
        return DesignMatrix(np.zeros((0, spec.dimension)), times)
    clipped = _clip_to_domain(spec, times)
    values = BSpline.design_matrix(clipped, spec.knots, spec.degree).toarray()
    return DesignMatrix(values, times)


def seasonal_knots(spec: BasisSpec) -> np.ndarray:
    """Uniform knots on one period, extended by `degree` spacings on both sides."""
    spacing = spec.period / spec.dimension
    return spacing * np.arange(-spec.degree, spec.dimension + spec.degree + 1)


def eval_seasonal(spec: BasisSpec, times) -> DesignMatrix:
    """
    Cyclic B-splines on t mod period.

    An ordinary uniform B-spline basis with d + degree columns is evaluated on
    one period and column j is folded onto column j mod d, so wrapped tails are
    summed and B(t) = B(t + period).
    """
    _require(spec, BasisFamily.SEASONAL_BSPLINE)
    times = _as_times(times)
    if times.size == 0:
        return DesignMatrix(np.zeros((0, spec.dimension)), times)
    phase = np.mod(times, spec.period)
    phase[phase >= spec.period] = 0.0
    raw = BSpline.design_matrix(phase, seasonal_knots(spec), spec.degree).toarray()
    values = np.zeros((times.shape[0], spec.dimension))
    for j in range(raw.shape[1]):
        values[:, j % spec.dimension] += raw[:, j]
    return DesignMatrix(values, times)


def eval_composite(spec: BasisSpec, times) -> DesignMatrix:
    """Sub-design matrices side by side, in part order."""
    _require(spec, BasisFamily.COMPOSITE)
    times = _as_times(times)
    blocks = [evaluate(part, times).values for part in spec.parts]
    return DesignMatrix(np.hstack(blocks), times)


EVALUATORS = {
    BasisFamily.LEGENDRE: eval_legendre,
    BasisFamily.BSPLINE: eval_bspline,
    BasisFamily.SEASONAL_BSPLINE: eval_seasonal,
    BasisFamily.COMPOSITE: eval_composite,
}


def evaluate(spec: BasisSpec, times) -> DesignMatrix:
    return EVALUATORS[spec.family](spec, times)


def design(spec: BasisSpec, times) -> np.ndarray:
    """Shortcut for the raw (n, d) matrix."""
    return evaluate(spec, times).values


def default_knots(spec: BasisSpec) -> list:
    """The knot vector actually used by a spline family, as a JSON array."""
    if spec.family == BasisFamily.BSPLINE:
        return spec.knot_list()
    if spec.family == BasisFamily.SEASONAL_BSPLINE:
        return [float(k) for k in seasonal_knots(spec)]
    return []
