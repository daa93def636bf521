"""
Evidence lower bound: closed form and Monte Carlo check.
"""
import logging
from typing import Dict, NamedTuple

import numpy as np
from scipy import special, stats

from dmlmm.exceptions import ContractViolation, NumericalFailure
from .factors import (
    LOG_2PI, InverseGamma, cauchy_variance_prior, dirichlet_elbo_term, dirichlet_log_normalizer, expected_log_ig,
)
from .local import local_terms
from .state import LayerFactors, VariationalState, as_designs

logger = logging.getLogger(__name__)


def _half_cauchy_terms(values: InverseGamma, mixing: InverseGamma, scale: float):
    """
    E[log IG(x; 1/2, 1/m)] + E[log IG(m; 1/2, 1/scale²)] plus both
    entropies, elementwise.
    """
    return (expected_log_ig(0.5, -mixing.log_mean, mixing.inv_mean, values.log_mean, values.inv_mean)
            + expected_log_ig(0.5, -2.0 * np.log(scale), scale ** -2, mixing.log_mean, mixing.inv_mean)
            + values.entropy() + mixing.entropy())


def _cauchy_variance_terms(values: InverseGamma, scale: float):
    """E[log IG(ν; 1/2, s²/2)] plus the entropy of q(ν), elementwise."""
    prior = cauchy_variance_prior(scale)
    return (expected_log_ig(prior.shape, np.log(prior.rate), prior.rate, values.log_mean, values.inv_mean)
            + values.entropy())


def _row_entropy(factors: LayerFactors) -> float:
    mask = factors.mask
    total = 0.0
    for k in range(factors.n_components):
        for j in range(factors.input_dim):
            active = np.flatnonzero(mask[j])
            sign, logdet = np.linalg.slogdet(factors.coef_cov[k, j][np.ix_(active, active)])
            if sign <= 0:
                return -np.inf
            total += 0.5 * (active.size * (LOG_2PI + 1.0) + logdet)
    return total


def _layer_terms(factors: LayerFactors, hyper, concentration: float) -> Dict[str, float]:
    second = factors.second_moment()
    mean_sq = second[:, :, 0, 0]
    loading_sq = np.diagonal(second, axis1=2, axis2=3)[:, :, 1:]
    free = np.broadcast_to(factors.loading_mask, loading_sq.shape)

    means = (-0.5 * (LOG_2PI + factors.mean_scale.log_mean
                     + factors.mean_scale.inv_mean * mean_sq)
             + _cauchy_variance_terms(factors.mean_scale, hyper.mean_scale))
    global_scale = factors.global_scale
    loadings = -0.5 * (LOG_2PI + factors.local_scale.log_mean + global_scale.log_mean[:, None, None]
                       + factors.local_scale.inv_mean * global_scale.inv_mean[:, None, None] * loading_sq)
    loadings += _half_cauchy_terms(factors.local_scale, factors.local_mixing, 1.0)
    prior_alpha = np.full(factors.n_components, concentration)
    return {
        'noise': float(_half_cauchy_terms(factors.noise, factors.noise_mixing, hyper.noise_scale).sum()),
        'means': float(means.sum()),
        'loadings': float(loadings[free].sum()
                          + _half_cauchy_terms(global_scale, factors.global_mixing,
                                               hyper.horseshoe_scale).sum()),
        'rows': _row_entropy(factors),
        'weights': dirichlet_elbo_term(prior_alpha, factors.dirichlet),
    }


def global_terms(state: VariationalState) -> Dict[str, float]:
    """Prior expectations and entropies of every global factor, by label."""
    hyper = state.hyper
    terms = {
        'observation_noise': float(_half_cauchy_terms(state.sigma2, state.psi, hyper.noise_scale).sum()),
    }
    for layer, (factors, alpha) in enumerate(zip(state.layers, hyper.concentration(state.arch))):
        for name, value in _layer_terms(factors, hyper, alpha).items():
            terms[f'layer{layer + 1}.{name}'] = value
    return terms


def _check_finite(terms: Dict[str, float]):
    for label, value in terms.items():
        if not np.isfinite(value):
            raise NumericalFailure(f"ELBO term {label} is not finite", label=label)


def elbo(state: VariationalState, data, subset=None) -> float:
    """
    Closed-form ELBO. With a subset the local sum is rescaled by n/|S|,
    an unbiased estimate of the full objective.

    Raises:
        NumericalFailure: naming the first non-finite term
    """
    designs = as_designs(data, state.basis)
    if designs.n_subjects != state.n_subjects:
        raise ContractViolation("dataset and variational state cover different subjects")
    idx = np.arange(state.n_subjects) if subset is None else np.asarray(subset, dtype=int)
    if idx.size == 0:
        raise ContractViolation("ELBO subset must contain at least one subject")
    terms = global_terms(state)
    terms['local'] = float(state.n_subjects / idx.size * local_terms(state, designs, idx).sum())
    _check_finite(terms)
    return float(sum(terms.values()))


class McElboEstimate(NamedTuple):
    mean: float
    std_error: float
    log_evidence: float
    count: int


def _ig_logpdf(x, shape, rate):
    return stats.invgamma.logpdf(x, shape, scale=rate)


def _log_dirichlet(weights, alpha) -> float:
    log_w = np.log(np.maximum(weights, np.finfo(float).tiny))
    return dirichlet_log_normalizer(alpha) + float(((alpha - 1.0) * log_w).sum())


def _sample_half_cauchy(values: InverseGamma, mixing: InverseGamma, scale: float, rng, mask=None):
    """Draw (value, mixing) from q and return them with log p - log q."""
    x, m = values.sample(rng), mixing.sample(rng)
    terms = (_ig_logpdf(x, 0.5, 1.0 / m) + _ig_logpdf(m, 0.5, scale ** -2)
             - values.log_density(x) - mixing.log_density(m))
    if mask is not None:
        terms = terms[mask]
    return x, m, float(terms.sum())


def _sample_layer(factors: LayerFactors, hyper, concentration: float, rng):
    """Draw the globals of one layer. Returns (means, loadings, noise, weights, log p - log q)."""
    mask = factors.mask
    coef = np.zeros_like(factors.coef_mean)
    log_ratio = 0.0
    for k in range(factors.n_components):
        for j in range(factors.input_dim):
            active = np.flatnonzero(mask[j])
            row = stats.multivariate_normal(factors.coef_mean[k, j, active],
                                            factors.coef_cov[k, j][np.ix_(active, active)])
            draw = np.atleast_1d(row.rvs(random_state=rng))
            coef[k, j, active] = draw
            log_ratio -= row.logpdf(draw)
    means, loadings = coef[:, :, 0], coef[:, :, 1:]
    free = np.broadcast_to(factors.loading_mask, loadings.shape)

    noise, _, ratio = _sample_half_cauchy(factors.noise, factors.noise_mixing, hyper.noise_scale, rng)
    log_ratio += ratio
    mean_prior = cauchy_variance_prior(hyper.mean_scale)
    mean_var = factors.mean_scale.sample(rng)
    log_ratio += float((_ig_logpdf(mean_var, mean_prior.shape, mean_prior.rate)
                        - factors.mean_scale.log_density(mean_var)).sum())
    log_ratio += float(stats.norm.logpdf(means, scale=np.sqrt(mean_var)).sum())
    local, _, ratio = _sample_half_cauchy(factors.local_scale, factors.local_mixing, 1.0, rng, mask=free)
    log_ratio += ratio
    global_, _, ratio = _sample_half_cauchy(factors.global_scale, factors.global_mixing,
                                            hyper.horseshoe_scale, rng)
    log_ratio += ratio
    variance = local * global_[:, None, None]
    log_ratio += float(stats.norm.logpdf(loadings[free], scale=np.sqrt(variance[free])).sum())

    weights = rng.dirichlet(factors.dirichlet)
    log_ratio += (_log_dirichlet(weights, np.full(factors.n_components, concentration))
                  - _log_dirichlet(weights, factors.dirichlet))
    return means, loadings, noise, weights, log_ratio


def _log_weight(state: VariationalState, designs, rng) -> float:
    hyper = state.hyper
    n = state.n_subjects
    sigma2, _, log_ratio = _sample_half_cauchy(state.sigma2, state.psi, hyper.noise_scale, rng)
    layers = [_sample_layer(f, hyper, a, rng) for f, a in zip(state.layers, hyper.concentration(state.arch))]

    latents = [m + np.sqrt(v) * rng.standard_normal(m.shape)
               for m, v in zip(state.latent_mean, state.latent_var)]
    for latent, m, v in zip(latents, state.latent_mean, state.latent_var):
        log_ratio -= float(stats.norm.logpdf(latent, m, np.sqrt(v)).sum())
    cumulative = np.cumsum(state.resp, axis=1)
    paths = np.minimum((rng.random(n)[:, None] > cumulative).sum(axis=1), state.arch.n_paths - 1)
    log_ratio -= float(np.log(state.resp[np.arange(n), paths]).sum())
    labels = np.unravel_index(paths, state.arch.components)

    fitted = [x @ beta for x, beta in zip(designs.designs, latents[0])]
    log_ratio += float(sum(stats.norm.logpdf(y, mu, np.sqrt(sigma2)).sum()
                           for y, mu in zip(designs.values, fitted)))
    for level, (means, loadings, noise, weights, ratio) in enumerate(layers):
        chosen = labels[level]
        centre = means[chosen] + np.einsum('njq,nq->nj', loadings[chosen], latents[level + 1])
        log_ratio += ratio + float(np.log(np.maximum(weights[chosen], np.finfo(float).tiny)).sum())
        log_ratio += float(stats.norm.logpdf(latents[level], centre, np.sqrt(noise[chosen])).sum())
    log_ratio += float(stats.norm.logpdf(latents[-1]).sum())
    return log_ratio


def mc_elbo(state: VariationalState, data, count: int, seed) -> McElboEstimate:
    """
    Monte Carlo estimate of the ELBO from `count` joint draws of q, with its
    standard error and the importance-weighted log-evidence estimate
    log mean exp(log p - log q).
    """
    if count < 2:
        raise ContractViolation("mc_elbo needs at least two draws")
    designs = as_designs(data, state.basis)
    rng = np.random.default_rng(seed)
    weights = np.array([_log_weight(state, designs, rng) for _ in range(count)])
    if not np.all(np.isfinite(weights)):
        raise NumericalFailure("Monte Carlo ELBO produced non-finite log weights", label='mc_elbo')
    return McElboEstimate(
        mean=float(weights.mean()),
        std_error=float(weights.std(ddof=1) / np.sqrt(count)),
        log_evidence=float(special.logsumexp(weights) - np.log(count)),
        count=count,
    )
