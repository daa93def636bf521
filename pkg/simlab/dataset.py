"""
Longitudinal datasets and simulator sample sets.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from dmlmm.exceptions import ContractViolation, DmlmmError, ErrorCode


def _vector(values, name: str, subject_id) -> np.ndarray:
    array = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise ContractViolation(f"subject {subject_id}: {name} must be finite", subject=str(subject_id))
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    """Observed (times, values), optional held-out pairs and a true label."""

    id: str
    times: np.ndarray
    values: np.ndarray
    holdout_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    holdout_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    label: Any = None

    def __post_init__(self):
        object.__setattr__(self, 'id', str(self.id))
        for name in ('times', 'values', 'holdout_times', 'holdout_values'):
            object.__setattr__(self, name, _vector(getattr(self, name), name, self.id))
        if self.times.shape != self.values.shape:
            raise ContractViolation(f"subject {self.id}: times and values differ in length", subject=self.id)
        if self.holdout_times.shape != self.holdout_values.shape:
            raise ContractViolation(f"subject {self.id}: held-out times and values differ in length",
                                    subject=self.id)
        if np.intersect1d(self.times, self.holdout_times).size:
            raise ContractViolation(f"subject {self.id}: held-out times overlap observed times",
                                    subject=self.id)

    @property
    def n_observed(self) -> int:
        return self.times.shape[0]

    @property
    def n_holdout(self) -> int:
        return self.holdout_times.shape[0]


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    subjects: tuple
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ContractViolation("subject ids must be unique")
        object.__setattr__(self, 'subjects', subjects)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, index) -> SubjectRecord:
        return self.subjects[index]

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.subjects]

    @property
    def labels(self) -> Optional[list]:
        labels = [s.label for s in self.subjects]
        return None if all(label is None for label in labels) else labels

    @property
    def has_holdouts(self) -> bool:
        return any(s.n_holdout for s in self.subjects)

    def all_times(self) -> np.ndarray:
        return np.concatenate([np.concatenate([s.times, s.holdout_times]) for s in self.subjects])

    def find(self, subject_id) -> SubjectRecord:
        for subject in self.subjects:
            if subject.id == str(subject_id):
                return subject
        raise DmlmmError(f"unknown subject {subject_id!r}", code=ErrorCode.UNKNOWN_SUBJECT,
                         subject=str(subject_id))

    def require_observations(self) -> 'LongitudinalDataset':
        if not self.subjects:
            raise ContractViolation("dataset has no subjects")
        empty = [s.id for s in self.subjects if s.n_observed == 0]
        if empty:
            raise ContractViolation(
                f"{len(empty)} subjects have no observations, first {empty[0]}", subjects=empty[:10],
            )
        return self

    def subset(self, indices: Sequence[int]) -> 'LongitudinalDataset':
        return replace(self, subjects=tuple(self.subjects[i] for i in indices))


@dataclass(frozen=True, eq=False)
class SimulatorSample:
    """A full series y_1..y_T on the integer grid with its generating record."""

    series: np.ndarray
    record: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        series = np.array(self.series, dtype=float).reshape(-1)
        series.setflags(write=False)
        object.__setattr__(self, 'series', series)

    @property
    def length(self) -> int:
        return self.series.shape[0]


def stack_series(samples: Sequence[SimulatorSample]) -> np.ndarray:
    """(count, T) matrix; every sample must share one length."""
    if not samples:
        raise ContractViolation("empty simulator sample set")
    lengths = {s.length for s in samples}
    if len(lengths) != 1:
        raise ContractViolation(f"simulator samples have mixed lengths {sorted(lengths)}")
    return np.vstack([s.series for s in samples])
