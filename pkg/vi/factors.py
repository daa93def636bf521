"""
Exponential-family factors of the variational family and their expectations.
"""
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from scipy import special

LOG_2PI = float(np.log(2.0 * np.pi))


def positivity_floor() -> float:
    return getattr(settings, 'DMLMM_POSITIVITY_FLOOR', 1e-10)


@dataclass
class InverseGamma:
    """IG(shape, rate) factors, elementwise over arrays of any shape."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.shape = np.array(self.shape, dtype=float)
        self.rate = np.array(self.rate, dtype=float)

    @classmethod
    def from_mean(cls, mean, shape: float = 2.0) -> 'InverseGamma':
        """Factor with the given mean (shape > 1)."""
        mean = np.asarray(mean, dtype=float)
        return cls(np.full(mean.shape, shape), (shape - 1.0) * mean)

    @property
    def mean(self) -> np.ndarray:
        """E[x]; b/a stands in when the mean does not exist (a <= 1)."""
        return np.where(self.shape > 1.0, self.rate / np.maximum(self.shape - 1.0, 1e-300),
                        self.rate / self.shape)

    @property
    def inv_mean(self) -> np.ndarray:
        return self.shape / self.rate

    @property
    def log_mean(self) -> np.ndarray:
        return np.log(self.rate) - special.digamma(self.shape)

    def entropy(self) -> np.ndarray:
        return (self.shape + np.log(self.rate) + special.gammaln(self.shape)
                - (1.0 + self.shape) * special.digamma(self.shape))

    def blend(self, target_shape, target_rate, step: float):
        """Convex combination in natural-parameter space, floored."""
        floor = positivity_floor()
        self.shape = np.maximum((1.0 - step) * self.shape + step * np.asarray(target_shape), floor)
        self.rate = np.maximum((1.0 - step) * self.rate + step * np.asarray(target_rate), floor)

    def sample(self, rng) -> np.ndarray:
        return self.rate / rng.gamma(self.shape)

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return expected_log_ig(self.shape, np.log(self.rate), self.rate, np.log(x), 1.0 / x)

    def copy(self) -> 'InverseGamma':
        return InverseGamma(self.shape.copy(), self.rate.copy())


def cauchy_variance_prior(scale: float) -> InverseGamma:
    """IG(1/2, s²/2) on ν, so that N(0, ν) mixes to Cauchy(0, s)."""
    return InverseGamma(0.5, 0.5 * float(scale) ** 2)


def expected_log_ig(shape, log_rate, rate, log_x, inv_x):
    """
    E[log IG(x; shape, rate)] when rate and x are independent random
    quantities, given E[log rate], E[rate], E[log x] and E[1/x].
    """
    return shape * log_rate - special.gammaln(shape) - (shape + 1.0) * log_x - rate * inv_x


def gaussian_entropy(variances) -> float:
    """Entropy of a Gaussian with the given diagonal variances."""
    variances = np.asarray(variances, dtype=float)
    return float(0.5 * np.sum(LOG_2PI + 1.0 + np.log(variances)))


def dirichlet_log_mean(alpha: np.ndarray) -> np.ndarray:
    return special.digamma(alpha) - special.digamma(alpha.sum())


def dirichlet_log_normalizer(alpha: np.ndarray) -> float:
    return float(special.gammaln(alpha.sum()) - special.gammaln(alpha).sum())


def dirichlet_elbo_term(prior_alpha: np.ndarray, alpha: np.ndarray) -> float:
    """E_q[log Dir(w; prior_alpha)] - E_q[log Dir(w; alpha)]."""
    log_w = dirichlet_log_mean(alpha)
    return (dirichlet_log_normalizer(prior_alpha) + float(((prior_alpha - 1.0) * log_w).sum())
            - dirichlet_log_normalizer(alpha) - float(((alpha - 1.0) * log_w).sum()))
