"""
Black-box simulators and the nearest-neighbour ABC predictive.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from django.conf import settings

from dmlmm.exceptions import ContractViolation
from gmm.mixture import GaussianMixture
from predict.plugin import PredictiveResult
from .dataset import LongitudinalDataset, SimulatorSample, SubjectRecord, stack_series
from .generators import subject_id

logger = logging.getLogger(__name__)

# A generator maps a numpy Generator to one series
Generator = Callable[[np.random.Generator], SimulatorSample]
Predicate = Callable[[SimulatorSample], bool]

ACCEPTANCE_WINDOW = 100_000
MIN_ACCEPTANCE = 1e-3
CASE_THRESHOLD = 100.0
ABC_NEIGHBOURS = 100


def seasonal_generator(length: int = 128, period: int = 12) -> Generator:
    """
    Toy seasonal epidemic: cases_t = exp(level + slope t) (1 + a sin(2πt/period + φ))
    with log-normal noise, reported as log(1 + cases).
    """
    if length < 2 or period < 2:
        raise ContractViolation("seasonal generator needs length and period of at least 2")
    t = np.arange(1, length + 1, dtype=float)

    def draw(rng: np.random.Generator) -> SimulatorSample:
        params = {
            'level': float(rng.uniform(2.0, 6.0)),
            'slope': float(rng.normal(0.0, 0.01)),
            'amplitude': float(rng.uniform(0.2, 0.9)),
            'phase': float(rng.uniform(0.0, 2 * np.pi)),
            'noise_sd': 0.2,
        }
        trend = params['level'] + params['slope'] * t
        season = 1.0 + params['amplitude'] * np.sin(2 * np.pi * t / period + params['phase'])
        cases = np.exp(trend + rng.normal(scale=params['noise_sd'], size=length)) * season
        return SimulatorSample(np.log1p(cases), {'params': params, 'scale': 'log1p'})

    return draw


def exceeds_cases(threshold: float = CASE_THRESHOLD) -> Predicate:
    """Accept series whose original-scale count exceeds threshold at some time."""
    def predicate(sample: SimulatorSample) -> bool:
        series = sample.series
        if sample.record.get('scale') == 'log1p':
            series = np.expm1(series)
        return bool(np.max(series) > threshold)
    return predicate


def simulate_blackbox(generator: Generator, count: int, seed: int,
                      predicate: Optional[Predicate] = None) -> List[SimulatorSample]:
    """
    count accepted draws; attempt a uses the stream default_rng([seed, a]) and
    records it. Aborts when fewer than 1e-3 of the first 1e5 attempts pass.
    """
    if count < 1:
        raise ContractViolation("simulate at least one sample")
    accepted: List[SimulatorSample] = []
    attempt = 0
    length = None
    while len(accepted) < count:
        draw = generator(np.random.default_rng([seed, attempt]))
        if length is None:
            length = draw.length
        elif draw.length != length:
            raise ContractViolation(f"generator changed series length from {length} to {draw.length}")
        if predicate is None or predicate(draw):
            record = dict(draw.record, seed=[int(seed), attempt])
            accepted.append(SimulatorSample(draw.series, record))
        attempt += 1
        if attempt >= ACCEPTANCE_WINDOW and len(accepted) / attempt < MIN_ACCEPTANCE:
            raise ContractViolation(
                f"acceptance rate {len(accepted) / attempt:.2g} after {attempt} attempts",
                attempts=attempt, accepted=len(accepted),
            )
    logger.info(f"Simulated {count} series in {attempt} attempts "
                f"(acceptance {count / attempt:.3f})")
    return accepted


def split_samples(samples: Sequence[SimulatorSample], n_train: int):
    """First n_train samples for training, the rest for testing."""
    if not 0 < n_train < len(samples):
        raise ContractViolation("train size must leave at least one test sample")
    return list(samples[:n_train]), list(samples[n_train:])


def samples_to_dataset(samples: Sequence[SimulatorSample], split: Optional[int] = None) -> LongitudinalDataset:
    """
    Series on t = 1..T as subjects; with a split t the suffix y_{t+1:T}
    is held out.
    """
    series = stack_series(samples)
    length = series.shape[1]
    if split is not None and not 1 <= split < length:
        raise ContractViolation(f"split {split} outside 1..{length - 1}")
    cut = length if split is None else split
    grid = np.arange(1, length + 1, dtype=float)
    records = [
        SubjectRecord(
            id=subject_id(i),
            times=grid[:cut],
            values=row[:cut],
            holdout_times=grid[cut:],
            holdout_values=row[cut:],
        )
        for i, row in enumerate(series)
    ]
    return LongitudinalDataset(tuple(records), {'generator': 'blackbox', 'split': split})


@dataclass(frozen=True, eq=False)
class AbcEnsemble:
    """Suffixes of the k nearest training series, equally weighted."""

    suffixes: np.ndarray
    neighbours: np.ndarray
    distances: np.ndarray
    split: int

    @property
    def mean(self) -> np.ndarray:
        return self.suffixes.mean(axis=0)

    def band(self, level: float):
        tail = 0.5 * (1.0 - level)
        return (np.quantile(self.suffixes, tail, axis=0),
                np.quantile(self.suffixes, 1.0 - tail, axis=0))

    def bandwidths(self) -> np.ndarray:
        """Silverman's rule per coordinate with the ensemble standard deviation."""
        count, dim = self.suffixes.shape
        spread = self.suffixes.std(axis=0, ddof=1) if count > 1 else np.zeros(dim)
        factor = (4.0 / (dim + 2.0)) ** (1.0 / (dim + 4.0)) * count ** (-1.0 / (dim + 4.0))
        floor = getattr(settings, 'DMLMM_POSITIVITY_FLOOR', 1e-10)
        return np.maximum(factor * spread, np.sqrt(floor) * np.maximum(1.0, np.abs(self.mean)))

    def kernel_mixture(self) -> GaussianMixture:
        """Equal-weight Gaussian kernels on the ensemble members."""
        count, dim = self.suffixes.shape
        variance = self.bandwidths() ** 2
        covariances = np.broadcast_to(np.diag(variance), (count, dim, dim))
        return GaussianMixture(np.full(count, 1.0 / count), self.suffixes, covariances)

    def as_predictive(self) -> PredictiveResult:
        grid = np.arange(self.split + 1, self.split + 1 + self.suffixes.shape[1], dtype=float)
        return PredictiveResult(self.kernel_mixture(), grid, 'abc')


def abc_predict(train: Sequence[SimulatorSample], prefix, k_neighbors: int = ABC_NEIGHBOURS,
                seed: int = 0) -> AbcEnsemble:
    """
    Rank training series by the Euclidean distance between their first t
    values and the prefix and keep the suffixes of the k nearest. Ties are
    broken by a seeded permutation of the training order.
    """
    if not train:
        raise ContractViolation("ABC needs a non-empty training set")
    matrix = stack_series(train)
    prefix = np.asarray(prefix, dtype=float).reshape(-1)
    split = prefix.shape[0]
    if not 1 <= split < matrix.shape[1]:
        raise ContractViolation(f"prefix length {split} outside 1..{matrix.shape[1] - 1}")
    if not 1 <= k_neighbors <= matrix.shape[0]:
        raise ContractViolation(f"k_neighbors must lie in 1..{matrix.shape[0]}")

    order = np.random.default_rng(seed).permutation(matrix.shape[0])
    distances = np.linalg.norm(matrix[order, :split] - prefix, axis=1)
    nearest = order[np.argsort(distances, kind='stable')[:k_neighbors]]
    return AbcEnsemble(
        suffixes=matrix[nearest, split:],
        neighbours=nearest,
        distances=np.linalg.norm(matrix[nearest, :split] - prefix, axis=1),
        split=split,
    )
