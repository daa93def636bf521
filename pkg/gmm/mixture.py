"""
Gaussian mixture machinery: densities, CDFs, moments, linear-Gaussian
conditioning, sampling and Monte Carlo KL estimation.

Every predictive quantity in the project reduces to these operations.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from django.conf import settings
from scipy import linalg, special, stats

from dmlmm.exceptions import ContractViolation
from .linalg import gaussian_logpdf, stable_cholesky, symmetrize

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOLERANCE = 1e-12
SYMMETRY_TOLERANCE = 1e-10
# Weights below this are treated as exactly zero
NEGLIGIBLE_WEIGHT = 1e-300


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weights (K,), means (K, D) and covariances (K, D, D)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        means = np.asarray(self.means, dtype=float)
        covariances = np.asarray(self.covariances, dtype=float)
        if means.ndim == 1:
            means = means.reshape(weights.shape[0], -1)
        if covariances.ndim == 2 and weights.shape[0] == 1:
            covariances = covariances[np.newaxis]

        n_components = weights.shape[0]
        if n_components == 0:
            raise ContractViolation("mixture needs at least one component")
        if means.shape[0] != n_components or covariances.shape[0] != n_components:
            raise ContractViolation(
                "weights, means and covariances disagree on the component count",
                weights=int(n_components), means=int(means.shape[0]),
                covariances=int(covariances.shape[0]),
            )
        dim = means.shape[1]
        if covariances.shape[1:] != (dim, dim):
            raise ContractViolation(
                f"covariances must be {dim}x{dim} to match the means",
            )
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ContractViolation("mixture weights must be nonnegative and finite")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ContractViolation(
                f"mixture weights sum to {weights.sum()!r}, not 1",
            )
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covariances))):
            raise ContractViolation("mixture means and covariances must be finite")
        for k in range(n_components):
            cov = covariances[k]
            tolerance = SYMMETRY_TOLERANCE * max(1.0, float(np.abs(cov).max(initial=0.0)))
            if np.abs(cov - cov.T).max(initial=0.0) > tolerance:
                raise ContractViolation(f"covariance of component {k} is not symmetric")

        object.__setattr__(self, 'weights', _frozen(weights))
        object.__setattr__(self, 'means', _frozen(means))
        object.__setattr__(self, 'covariances', _frozen(covariances))
        # PSD check via attempted factorization
        self.cholesky_factors

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @cached_property
    def cholesky_factors(self) -> np.ndarray:
        return np.stack([
            stable_cholesky(cov, label=f'component {k}')
            for k, cov in enumerate(self.covariances)
        ])

    @classmethod
    def single(cls, mean, covariance) -> 'GaussianMixture':
        mean = np.asarray(mean, dtype=float).reshape(1, -1)
        covariance = np.asarray(covariance, dtype=float).reshape(1, mean.shape[1], mean.shape[1])
        return cls(np.ones(1), mean, covariance)

    def to_dict(self) -> dict:
        from .serializers import GaussianMixtureSerializer
        return dict(GaussianMixtureSerializer(self).data)

    @classmethod
    def from_dict(cls, data: dict) -> 'GaussianMixture':
        from .serializers import GaussianMixtureSerializer
        serializer = GaussianMixtureSerializer(data=data)
        if not serializer.is_valid():
            raise ContractViolation("invalid mixture document", errors=str(serializer.errors))
        return serializer.save()


@dataclass(frozen=True, eq=False)
class LinearObservationMap:
    """Observation design (n, D), prediction design (T, D) and noise variance."""

    obs_matrix: np.ndarray
    pred_matrix: np.ndarray
    noise_variance: float

    def __post_init__(self):
        obs = np.asarray(self.obs_matrix, dtype=float)
        pred = np.asarray(self.pred_matrix, dtype=float)
        if obs.ndim != 2 or pred.ndim != 2:
            raise ContractViolation("observation and prediction designs must be matrices")
        if obs.shape[1] != pred.shape[1]:
            raise ContractViolation("observation and prediction designs differ in width")
        if not self.noise_variance > 0:
            raise ContractViolation("noise variance must be positive")
        object.__setattr__(self, 'obs_matrix', _frozen(obs))
        object.__setattr__(self, 'pred_matrix', _frozen(pred))
        object.__setattr__(self, 'noise_variance', float(self.noise_variance))


@dataclass(frozen=True)
class KLEstimate:
    value: float
    std_error: float
    n_samples: int
    floored: int = 0

    @property
    def was_floored(self) -> bool:
        return self.floored > 0


def _check_dimension(gmm: GaussianMixture, dim: int, what: str):
    if dim != gmm.dimension:
        raise ContractViolation(
            f"{what} has dimension {dim}, mixture has {gmm.dimension}",
        )


def component_log_pdf(gmm: GaussianMixture, x) -> np.ndarray:
    """Per-component log densities, shape (N, K)."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    _check_dimension(gmm, points.shape[1], 'point')
    factors = gmm.cholesky_factors
    return np.column_stack([
        gaussian_logpdf(points, gmm.means[k], factors[k])
        for k in range(gmm.n_components)
    ])


def _log_weights(gmm: GaussianMixture) -> np.ndarray:
    with np.errstate(divide='ignore'):
        log_w = np.log(gmm.weights)
    log_w[gmm.weights < NEGLIGIBLE_WEIGHT] = -np.inf
    return log_w


def log_pdf(gmm: GaussianMixture, x):
    """
    log Σ_k w_k φ(x; μ_k, Σ_k), computed with log-sum-exp.

    A single D-vector gives a float; an (N, D) array gives N values.
    """
    x = np.asarray(x, dtype=float)
    per_component = component_log_pdf(gmm, x)
    values = special.logsumexp(per_component + _log_weights(gmm), axis=1)
    if x.ndim == 1:
        return float(values[0])
    return values


def cdf_scalar(gmm: GaussianMixture, x):
    """Σ_k w_k Φ((x − μ_k)/σ_k) for a one-dimensional mixture."""
    if gmm.dimension != 1:
        raise ContractViolation("cdf_scalar needs a one-dimensional mixture")
    points = np.asarray(x, dtype=float)
    sd = np.sqrt(gmm.covariances[:, 0, 0])
    means = gmm.means[:, 0]
    values = np.zeros(points.shape + (gmm.n_components,))
    for k in range(gmm.n_components):
        if sd[k] > 0:
            values[..., k] = stats.norm.cdf(points, loc=means[k], scale=sd[k])
        else:
            values[..., k] = (points >= means[k]).astype(float)
    result = values @ gmm.weights
    return float(result) if np.ndim(result) == 0 else result


def moments(gmm: GaussianMixture) -> Tuple[np.ndarray, np.ndarray]:
    """Mixture mean and covariance (law of total variance)."""
    mean = gmm.weights @ gmm.means
    second = np.einsum('k,kij->ij', gmm.weights, gmm.covariances)
    second += np.einsum('k,ki,kj->ij', gmm.weights, gmm.means, gmm.means)
    covariance = symmetrize(second - np.outer(mean, mean))
    return mean, covariance


def _posterior_components(gmm, obs_matrix, noise_variance, y_obs):
    """Per-component random-effect posteriors and log evidences."""
    n_obs = obs_matrix.shape[0]
    post_means = np.empty_like(gmm.means)
    post_covs = np.empty_like(gmm.covariances)
    log_evidence = np.zeros(gmm.n_components)
    if n_obs == 0:
        return np.array(gmm.means), np.array(gmm.covariances), log_evidence

    eye = np.eye(n_obs)
    for k in range(gmm.n_components):
        mean, cov = gmm.means[k], gmm.covariances[k]
        gain_source = obs_matrix @ cov                     # (n, D)
        obs_cov = symmetrize(gain_source @ obs_matrix.T) + noise_variance * eye
        chol = stable_cholesky(obs_cov, label=f'observation covariance of component {k}')
        resid = y_obs - obs_matrix @ mean
        whitened = linalg.solve_triangular(chol, resid, lower=True)
        half_gain = linalg.solve_triangular(chol, gain_source, lower=True)   # (n, D)
        post_means[k] = mean + half_gain.T @ whitened
        post_covs[k] = symmetrize(cov - half_gain.T @ half_gain)
        log_evidence[k] = gaussian_logpdf(resid[np.newaxis], np.zeros(n_obs), chol)[0]
    return post_means, post_covs, log_evidence


def _updated_weights(gmm, log_evidence) -> np.ndarray:
    log_w = _log_weights(gmm) + log_evidence
    weights = np.exp(log_w - special.logsumexp(log_w))
    weights[weights < NEGLIGIBLE_WEIGHT] = 0.0
    return weights / weights.sum()


def _check_observations(gmm, obs_matrix, y_obs):
    obs_matrix = np.asarray(obs_matrix, dtype=float)
    if obs_matrix.size == 0:
        obs_matrix = obs_matrix.reshape(0, gmm.dimension)
    if obs_matrix.ndim != 2 or obs_matrix.shape[1] != gmm.dimension:
        raise ContractViolation("observation design width differs from the mixture dimension")
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)
    if obs_matrix.shape[0] != y_obs.shape[0]:
        raise ContractViolation(
            f"{y_obs.shape[0]} observations for a design with {obs_matrix.shape[0]} rows",
        )
    return obs_matrix, y_obs


def posterior(gmm: GaussianMixture, obs_matrix, noise_variance: float, y_obs) -> GaussianMixture:
    """
    Noise-free posterior mixture of the random effect given y = B x + ε.
    Conditioning on y_a and then y_b equals conditioning on both.
    """
    obs_matrix, y_obs = _check_observations(gmm, obs_matrix, y_obs)
    means, covs, log_evidence = _posterior_components(gmm, obs_matrix, noise_variance, y_obs)
    return GaussianMixture(_updated_weights(gmm, log_evidence), means, covs)


def condition(gmm: GaussianMixture, obs_map: LinearObservationMap, y_obs) -> GaussianMixture:
    """
    Conditional mixture of ỹ = B_pred x + ε̃ given y = B_obs x + ε.

    Component weights are proportional to w_k φ(y; B_obs μ_k, B_obs Σ_k B_obsᵀ + σ²I);
    means and covariances follow joint-Gaussian conditioning with the σ²I_T
    term included in each predictive covariance.
    """
    _check_dimension(gmm, obs_map.obs_matrix.shape[1], 'observation map')
    obs_matrix, y_obs = _check_observations(gmm, obs_map.obs_matrix, y_obs)
    pred = obs_map.pred_matrix
    means, covs, log_evidence = _posterior_components(
        gmm, obs_matrix, obs_map.noise_variance, y_obs,
    )
    eye = np.eye(pred.shape[0])
    pred_means = means @ pred.T
    pred_covs = np.stack([
        symmetrize(pred @ cov @ pred.T) + obs_map.noise_variance * eye for cov in covs
    ])
    return GaussianMixture(_updated_weights(gmm, log_evidence), pred_means, pred_covs)


def pushforward(gmm: GaussianMixture, matrix, noise_variance: float = 0.0) -> GaussianMixture:
    """Mixture of B x + ε for x ~ gmm and ε ~ N(0, noise_variance I)."""
    matrix = np.asarray(matrix, dtype=float)
    _check_dimension(gmm, matrix.shape[1], 'design')
    eye = np.eye(matrix.shape[0])
    covs = np.stack([
        symmetrize(matrix @ cov @ matrix.T) + noise_variance * eye for cov in gmm.covariances
    ])
    return GaussianMixture(gmm.weights, gmm.means @ matrix.T, covs)


def sample(gmm: GaussianMixture, count: int, seed) -> np.ndarray:
    """Ancestral draws: a component by weight, then a Gaussian draw."""
    if count < 1:
        raise ContractViolation("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(gmm.n_components, size=count, p=gmm.weights)
    normals = rng.standard_normal((count, gmm.dimension))
    draws = np.empty((count, gmm.dimension))
    factors = gmm.cholesky_factors
    for k in range(gmm.n_components):
        chosen = labels == k
        draws[chosen] = gmm.means[k] + normals[chosen] @ factors[k].T
    return draws


def kl_mc(p: GaussianMixture, q: GaussianMixture, n_samples: int, seed,
          log_floor: Optional[float] = None) -> KLEstimate:
    """Monte Carlo estimate of KL(p ‖ q) with draws from p."""
    if p.dimension != q.dimension:
        raise ContractViolation("KL needs mixtures of equal dimension")
    if n_samples < 1000:
        raise ContractViolation("KL estimation needs at least 1000 samples")
    if log_floor is None:
        log_floor = getattr(settings, 'DMLMM_KL_LOG_FLOOR', -700.0)

    draws = sample(p, n_samples, seed)
    log_p = log_pdf(p, draws)
    log_q = log_pdf(q, draws)
    floored = int(np.sum(~(log_q > log_floor)))
    if floored:
        logger.warning(f"KL estimate clamped {floored} of {n_samples} log densities of q")
        log_q = np.maximum(np.nan_to_num(log_q, nan=log_floor, neginf=log_floor), log_floor)
    terms = log_p - log_q
    return KLEstimate(
        value=float(terms.mean()),
        std_error=float(terms.std(ddof=1) / np.sqrt(n_samples)),
        n_samples=n_samples,
        floored=floored,
    )


def renormalize(gmm: GaussianMixture, keep) -> GaussianMixture:
    """Drop components outside the mask and rescale the survivors."""
    keep = np.asarray(keep, dtype=bool).reshape(-1)
    if keep.shape[0] != gmm.n_components:
        raise ContractViolation("keep mask length differs from the component count")
    if not keep.any():
        raise ContractViolation("renormalize must keep at least one component")
    kept = gmm.weights[keep]
    if kept.sum() <= 0:
        raise ContractViolation("kept components carry no weight")
    return GaussianMixture(kept / kept.sum(), gmm.means[keep], gmm.covariances[keep])
