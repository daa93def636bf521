"""
Plug-in predictive inference on a grid of new times.

Every operation is pure given the plug-in estimate; random draws come from
explicit seeds.
"""
import logging
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from dmlmm.exceptions import ContractViolation, NumericalFailure
from gmm.mixture import (
    GaussianMixture, LinearObservationMap, cdf_scalar, condition, kl_mc, log_pdf, moments,
    posterior, pushforward, sample,
)
from .plugin import MARGINAL, ConflictReport, PluginParams, PredictiveResult

logger = logging.getLogger(__name__)

HDR_SAMPLES = 100_000
KL_SAMPLES = 5_000
MIN_PRIOR_DRAWS = 100
# Initial bisection bracket half-width in mixture standard deviations
BRACKET_SDS = 12.0
BRACKET_WIDENINGS = 8
QUANTILE_TOLERANCE = 1e-8


def _times(values, name: str) -> np.ndarray:
    times = np.asarray(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(times)):
        raise ContractViolation(f"{name} must be finite")
    return times


def marginal_predictive(plugin: PluginParams, t_grid) -> PredictiveResult:
    """Prior predictive of a new subject: (w_k, Bμ_k, BΣ_kBᵀ + σ̂²I)."""
    grid = _times(t_grid, 't_grid')
    mixture = pushforward(plugin.beta_prior, plugin.design(grid), plugin.sigma2)
    return PredictiveResult(mixture, grid, MARGINAL)


def predictive(plugin: PluginParams, t_obs, y_obs, t_grid, subject_id=None) -> PredictiveResult:
    """
    Conditional predictive mixture of ỹ on the grid given a subject's
    observations. With no observations this is the marginal predictive,
    flagged as such whatever the subject.
    """
    t_obs = _times(t_obs, 't_obs')
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)
    if t_obs.shape != y_obs.shape:
        raise ContractViolation("observation times and values differ in length")
    if t_obs.size == 0:
        return marginal_predictive(plugin, t_grid)

    grid = _times(t_grid, 't_grid')
    obs_map = LinearObservationMap(plugin.design(t_obs), plugin.design(grid), plugin.sigma2)
    mixture = condition(plugin.beta_prior, obs_map, y_obs)
    return PredictiveResult(mixture, grid, MARGINAL if subject_id is None else subject_id)


def scalar_marginal(result: PredictiveResult, grid_index: int) -> GaussianMixture:
    """One-dimensional mixture of ỹ at a single grid point."""
    if not 0 <= grid_index < result.grid.shape[0]:
        raise ContractViolation(f"grid index {grid_index} outside 0..{result.grid.shape[0] - 1}")
    mixture = result.mixture
    i = slice(grid_index, grid_index + 1)
    return GaussianMixture(mixture.weights, mixture.means[:, i], mixture.covariances[:, i, i])


def mixture_quantile(scalar: GaussianMixture, probability: float) -> float:
    """
    Root of cdf(x) = probability by Brent's method, bracket starting at the
    mixture mean ± 12 SDs and doubled until it brackets the root.
    """
    mean, var = moments(scalar)
    centre, sd = float(mean[0]), float(np.sqrt(var[0, 0]))
    if sd == 0.0:
        return centre

    def gap(x):
        return cdf_scalar(scalar, x) - probability

    half_width = BRACKET_SDS * sd
    for _ in range(BRACKET_WIDENINGS):
        lower, upper = centre - half_width, centre + half_width
        if gap(lower) <= 0.0 <= gap(upper):
            return float(optimize.brentq(gap, lower, upper, xtol=QUANTILE_TOLERANCE))
        logger.debug(f"Quantile {probability} not bracketed at ±{half_width:.3g}, widening")
        half_width *= 2.0
    raise NumericalFailure(f"could not bracket the {probability} quantile", label='pointwise_band')


def pointwise_band(result: PredictiveResult, level: float) -> Tuple[np.ndarray, np.ndarray]:
    """Equal-tailed pointwise credible band at the given level."""
    if not 0.0 < level < 1.0:
        raise ContractViolation("band level must lie in (0, 1)")
    tail = 0.5 * (1.0 - level)
    size = result.grid.shape[0]
    lower, upper = np.empty(size), np.empty(size)
    for i in range(size):
        scalar = scalar_marginal(result, i)
        lower[i] = mixture_quantile(scalar, tail)
        upper[i] = mixture_quantile(scalar, 1.0 - tail)
    return lower, upper


def threshold_risk(result: PredictiveResult, grid_index: int, threshold: float) -> float:
    """P(ỹ(t̃_j) ≤ threshold)."""
    return float(cdf_curve(result, grid_index, threshold)[0])


def cdf_curve(result: PredictiveResult, grid_index: int, values) -> np.ndarray:
    return np.atleast_1d(cdf_scalar(scalar_marginal(result, grid_index), np.asarray(values, dtype=float)))


def cdf_table(result: PredictiveResult, values) -> pd.DataFrame:
    """Long table t, value, cdf: the predictive CDF at every grid point and value."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.size == 0:
        raise ContractViolation("cdf table needs at least one value")
    rows = [
        pd.DataFrame({'t': t, 'value': values, 'cdf': cdf_curve(result, i, values)})
        for i, t in enumerate(result.grid)
    ]
    return pd.concat(rows, ignore_index=True)


def correlation_function(result: PredictiveResult) -> Tuple[np.ndarray, np.ndarray]:
    """Predictive variance at each grid point and the correlation matrix between them."""
    _, covariance = moments(result.mixture)
    variance = np.diag(covariance).copy()
    scale = np.sqrt(variance)
    correlation = covariance / np.outer(scale, scale)
    np.fill_diagonal(correlation, 1.0)
    return variance, correlation


def band_table(result: PredictiveResult, level: float, threshold: Optional[float] = None) -> pd.DataFrame:
    """Columns t, mean, lower, upper and, with a threshold, risk."""
    mean, _ = moments(result.mixture)
    lower, upper = pointwise_band(result, level)
    table = pd.DataFrame({'t': result.grid, 'mean': mean, 'lower': lower, 'upper': upper})
    if threshold is not None:
        table['risk'] = [threshold_risk(result, i, threshold) for i in range(result.grid.shape[0])]
    return table


def cluster_assign(plugin: PluginParams, t_obs, y_obs) -> Tuple[int, np.ndarray]:
    """
    Posterior component probabilities w̃_k for a subject and the most
    probable component, lowest index on ties.
    """
    t_obs = _times(t_obs, 't_obs')
    if t_obs.size == 0:
        raise ContractViolation("cluster assignment needs at least one observation")
    weights = posterior(plugin.beta_prior, plugin.design(t_obs), plugin.sigma2, y_obs).weights
    return int(np.argmax(weights)), np.array(weights)


def hdr_log_density_thresholds(mixture: GaussianMixture, levels, n_samples: int = HDR_SAMPLES,
                               seed=0) -> np.ndarray:
    """Log-density cut-offs of the highest-density regions holding each level of mass."""
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    if np.any(levels <= 0.0) or np.any(levels >= 1.0):
        raise ContractViolation("coverage levels must lie in (0, 1)")
    draws = sample(mixture, n_samples, seed)
    return np.quantile(log_pdf(mixture, draws), 1.0 - levels)


def hdr_membership(mixture: GaussianMixture, y_true, levels, n_samples: int = HDR_SAMPLES,
                   seed=0) -> np.ndarray:
    """Membership of y_true in the HDR at every level, from one set of draws."""
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    if y_true.shape[0] != mixture.dimension:
        raise ContractViolation("y_true dimension differs from the predictive grid")
    cutoffs = hdr_log_density_thresholds(mixture, levels, n_samples, seed)
    return log_pdf(mixture, y_true) >= cutoffs


def elliptical_coverage(result: PredictiveResult, y_true, level: float, n_samples: int = HDR_SAMPLES,
                        seed=0) -> bool:
    """Whether y_true lies in the level highest-density region of the predictive."""
    return bool(hdr_membership(result.mixture, y_true, [level], n_samples, seed)[0])


def _divergence(plugin, prefix_times, prefix_values, suffix_times, marginal, n_kl_samples, seed):
    conditional = predictive(plugin, prefix_times, prefix_values, suffix_times).mixture
    return kl_mc(conditional, marginal, n_kl_samples, seed)


def conflict_tail_probability(plugin: PluginParams, t_obs, y_obs, split_index: int,
                              n_prior_draws: int, n_kl_samples: int = KL_SAMPLES,
                              seed=0) -> ConflictReport:
    """
    Prior-data conflict check for the prefix y_{1:t}: G is the KL divergence
    from the marginal predictive of the suffix to its predictive given the
    prefix. The tail probability is the share of prefixes drawn from the
    prior predictive whose G is at least the observed one. Every G uses the
    same KL draws.
    """
    t_obs = _times(t_obs, 't_obs')
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)
    if t_obs.shape != y_obs.shape:
        raise ContractViolation("observation times and values differ in length")
    if not 1 <= split_index < t_obs.shape[0]:
        raise ContractViolation(f"split index {split_index} outside 1..{t_obs.shape[0] - 1}")
    if n_prior_draws < MIN_PRIOR_DRAWS:
        raise ContractViolation(f"at least {MIN_PRIOR_DRAWS} prior draws are needed")

    prefix_times, suffix_times = t_obs[:split_index], t_obs[split_index:]
    draw_seed, kl_seed = np.random.SeedSequence(seed).spawn(2)
    marginal = marginal_predictive(plugin, suffix_times).mixture
    observed = _divergence(plugin, prefix_times, y_obs[:split_index], suffix_times, marginal,
                           n_kl_samples, kl_seed)

    prior_prefix = marginal_predictive(plugin, prefix_times).mixture
    prefixes = sample(prior_prefix, n_prior_draws, draw_seed)
    reference = np.array([
        _divergence(plugin, prefix_times, values, suffix_times, marginal, n_kl_samples, kl_seed).value
        for values in prefixes
    ])
    p = float(np.mean(reference >= observed.value))
    logger.info(f"Conflict check: G={observed.value:.4g} (se {observed.std_error:.2g}), p={p:.4g}")
    return ConflictReport(p=p, G_observed=observed.value, n_prior_draws=n_prior_draws,
                          kl_se=observed.std_error)
