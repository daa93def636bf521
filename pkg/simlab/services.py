"""
Value transforms and replicate seeding.
"""
from dataclasses import replace
from typing import List

import numpy as np
from scipy import special

from dmlmm.exceptions import ContractViolation
from .dataset import LongitudinalDataset

TRANSFORMS = ('identity', 'probit', 'log')


def transform_series(values, kind: str, subject_id: str = 'series') -> np.ndarray:
    """One value vector on the modelling scale."""
    if kind not in TRANSFORMS:
        raise ContractViolation(f"unknown transform {kind!r}", choices=list(TRANSFORMS))
    values = np.asarray(values, dtype=float)
    if kind == 'identity':
        return values
    if kind == 'probit':
        # Percentages, as for CD4 counts
        if np.any((values <= 0) | (values >= 100)):
            raise ContractViolation(f"subject {subject_id}: probit needs percentages in (0, 100)")
        return special.ndtri(values / 100.0)
    if np.any(values <= 0):
        raise ContractViolation(f"subject {subject_id}: log needs positive values")
    return np.log(values)


def transform_values(data: LongitudinalDataset, kind: str = 'identity') -> LongitudinalDataset:
    """Map every observed and held-out value to the modelling scale."""
    if kind not in TRANSFORMS:
        raise ContractViolation(f"unknown transform {kind!r}", choices=list(TRANSFORMS))
    subjects = tuple(
        replace(s, values=transform_series(s.values, kind, s.id),
                holdout_values=transform_series(s.holdout_values, kind, s.id))
        for s in data
    )
    return replace(data, subjects=subjects, metadata=dict(data.metadata, transform=kind))


def inverse_transform(values, kind: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if kind == 'identity':
        return values
    if kind == 'probit':
        return 100.0 * special.ndtr(values)
    if kind == 'log':
        return np.exp(values)
    raise ContractViolation(f"unknown transform {kind!r}", choices=list(TRANSFORMS))


def replicate_seeds(seed: int, count: int) -> List[int]:
    """
    Independent per-replicate seeds: the children of SeedSequence(seed),
    each reduced to its first 32-bit state word.
    """
    if count < 1:
        raise ContractViolation("at least one replicate is needed")
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]
