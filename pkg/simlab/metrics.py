"""
Held-out evaluation: RMSE, negative log-score and coverage.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_rand_score

from dmlmm.exceptions import ContractViolation, DmlmmError, ErrorCode
from gmm.mixture import log_pdf, moments
from predict.plugin import PluginParams, PredictiveResult
from predict.services import HDR_SAMPLES, cluster_assign, hdr_membership, pointwise_band, predictive
from .blackbox import AbcEnsemble, abc_predict
from .dataset import LongitudinalDataset, SimulatorSample, stack_series

logger = logging.getLogger(__name__)

POINTWISE_LEVELS = (0.05, 0.5, 0.95)
HDR_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True, eq=False)
class Prediction:
    """A predictive for one subject's held-out values and the values themselves."""

    subject_id: str
    result: Union[PredictiveResult, AbcEnsemble]
    truth: np.ndarray


@dataclass(frozen=True)
class ReplicateMetrics:
    name: str
    rmse: float
    log_rmse: float
    neg_log_score: float
    pointwise_coverage: Dict[float, float]
    elliptical_coverage: Dict[float, float]
    n_subjects: int
    n_points: int

    def to_dict(self) -> dict:
        from .serializers import ReplicateMetricsSerializer
        return dict(ReplicateMetricsSerializer(self).data)

    def flat(self) -> Dict[str, float]:
        row = {
            'rmse': self.rmse,
            'log_rmse': self.log_rmse,
            'neg_log_score': self.neg_log_score,
        }
        row.update({f'coverage_{level:g}': value for level, value in self.pointwise_coverage.items()})
        row.update({f'elliptical_{level:g}': value for level, value in self.elliptical_coverage.items()})
        return row


@dataclass(frozen=True)
class MetricsReport:
    replicates: Tuple[ReplicateMetrics, ...] = field(default_factory=tuple)

    @classmethod
    def combine(cls, reports: Sequence['MetricsReport']) -> 'MetricsReport':
        return cls(tuple(r for report in reports for r in report.replicates))

    def table(self) -> pd.DataFrame:
        """One row per replicate."""
        rows = [dict(name=r.name, n_subjects=r.n_subjects, n_points=r.n_points, **r.flat())
                for r in self.replicates]
        return pd.DataFrame(rows)

    def summary(self) -> pd.DataFrame:
        """Mean of every metric over replicates; an sd column only with more than one."""
        if not self.replicates:
            raise ContractViolation("no replicates to summarize")
        values = pd.DataFrame([r.flat() for r in self.replicates])
        summary = pd.DataFrame({'metric': values.columns, 'mean': values.mean(axis=0).to_numpy()})
        if len(self.replicates) > 1:
            summary['sd'] = values.std(axis=0, ddof=1).to_numpy()
        return summary

    def to_dict(self) -> dict:
        summary = self.summary()
        return {
            'replicates': [r.to_dict() for r in self.replicates],
            'summary': {
                row['metric']: {key: float(row[key]) for key in summary.columns if key != 'metric'}
                for _, row in summary.iterrows()
            },
        }


def _point_forecast(result, levels):
    if isinstance(result, AbcEnsemble):
        return result.mean, {level: result.band(level) for level in levels}, result.kernel_mixture()
    mean, _ = moments(result.mixture)
    return mean, {level: pointwise_band(result, level) for level in levels}, result.mixture


def evaluate(predictions: Sequence[Prediction], levels=POINTWISE_LEVELS, hdr_levels=HDR_LEVELS,
             name: str = 'replicate', n_hdr_samples: int = HDR_SAMPLES, seed: int = 0) -> MetricsReport:
    """
    Subject RMSE √(mean (ỹ − ŷ)²) with ŷ the predictive mean, averaged over
    subjects; negative log-score −log p(ỹ) per subject, averaged; pointwise
    band coverage pooled over held-out points; HDR coverage per subject.
    Subjects are processed in id order so the report does not depend on
    input order.
    """
    if not predictions:
        raise DmlmmError("nothing to evaluate: no held-out values", code=ErrorCode.NO_HOLDOUTS)
    levels, hdr_levels = tuple(levels), tuple(hdr_levels)
    rmse, log_score = [], []
    inside = np.zeros(len(levels))
    covered = np.zeros(len(hdr_levels))
    n_points = 0
    for prediction in sorted(predictions, key=lambda p: p.subject_id):
        truth = np.asarray(prediction.truth, dtype=float).reshape(-1)
        mean, bands, mixture = _point_forecast(prediction.result, levels)
        if truth.shape != mean.shape:
            raise ContractViolation(f"subject {prediction.subject_id}: truth and predictive dimensions differ")
        rmse.append(float(np.sqrt(np.mean((truth - mean) ** 2))))
        log_score.append(float(log_pdf(mixture, truth)))
        for j, level in enumerate(levels):
            lower, upper = bands[level]
            inside[j] += np.sum((truth >= lower) & (truth <= upper))
        if hdr_levels:
            covered += hdr_membership(mixture, truth, hdr_levels, n_hdr_samples, seed)
        n_points += truth.size

    mean_rmse = float(np.mean(rmse))
    with np.errstate(divide='ignore'):
        log_rmse = float(np.log(mean_rmse))
    metrics = ReplicateMetrics(
        name=name,
        rmse=mean_rmse,
        log_rmse=log_rmse,
        neg_log_score=-float(np.mean(log_score)),
        pointwise_coverage={level: float(inside[j] / n_points) for j, level in enumerate(levels)},
        elliptical_coverage={level: float(covered[j] / len(rmse)) for j, level in enumerate(hdr_levels)},
        n_subjects=len(rmse),
        n_points=n_points,
    )
    logger.info(f"{name}: log-RMSE {metrics.log_rmse:.4f}, negative log-score {metrics.neg_log_score:.4f} "
                f"over {metrics.n_subjects} subjects")
    return MetricsReport((metrics,))


def predict_holdouts(plugin: PluginParams, data: LongitudinalDataset) -> List[Prediction]:
    """Predictive of every subject's held-out values given its observed ones."""
    if not data.has_holdouts:
        raise DmlmmError("dataset has no held-out values", code=ErrorCode.NO_HOLDOUTS)
    predictions = []
    for subject in data:
        if not subject.n_holdout:
            continue
        order = np.argsort(subject.holdout_times)
        result = predictive(plugin, subject.times, subject.values, subject.holdout_times[order],
                            subject_id=subject.id)
        predictions.append(Prediction(subject.id, result, subject.holdout_values[order]))
    return predictions


def cluster_agreement(plugin: PluginParams, data: LongitudinalDataset) -> Optional[float]:
    """Adjusted Rand index of the plug-in cluster assignment against the true labels."""
    labels = data.labels
    if labels is None:
        return None
    assigned = [cluster_assign(plugin, s.times, s.values)[0] for s in data]
    return float(adjusted_rand_score([str(label) for label in labels], assigned))


def abc_benchmark(train: Sequence[SimulatorSample], test: Sequence[SimulatorSample], split: int,
                  plugin: PluginParams, k_neighbors: int, levels=POINTWISE_LEVELS,
                  hdr_levels=HDR_LEVELS, n_hdr_samples: int = HDR_SAMPLES, seed: int = 0) -> MetricsReport:
    """
    Suffix prediction for every test series from its first split values,
    once with the fitted plug-in and once with nearest-neighbour ABC on the
    training series.
    """
    series = stack_series(test)
    grid = np.arange(1, series.shape[1] + 1, dtype=float)
    dmlmm, abc = [], []
    for i, row in enumerate(series):
        sid = f'test{i:05d}'
        prefix, suffix = row[:split], row[split:]
        result = predictive(plugin, grid[:split], prefix, grid[split:], subject_id=sid)
        dmlmm.append(Prediction(sid, result, suffix))
        abc.append(Prediction(sid, abc_predict(train, prefix, k_neighbors, seed), suffix))
    return MetricsReport.combine([
        evaluate(dmlmm, levels, hdr_levels, 'dmlmm', n_hdr_samples, seed),
        evaluate(abc, levels, hdr_levels, 'abc', n_hdr_samples, seed),
    ])
