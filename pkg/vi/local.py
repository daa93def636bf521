"""
Per-subject coordinate ascent on q(β_i), q(z_i^(l)) and r_i.

Latent level 0 is β. Layer l (0-based) generates level l from level l+1
through x = (1, z^(l+1)); the top level L has a standard normal prior.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple

import numpy as np
from scipy import special

from .factors import LOG_2PI, dirichlet_log_mean, positivity_floor
from .state import FitConfig, SubjectDesigns, VariationalState, as_designs

logger = logging.getLogger(__name__)


class LayerMoments(NamedTuple):
    inv_noise: np.ndarray     # E[1/δ] (K, p)
    log_noise: np.ndarray     # E[log δ] (K, p)
    coef_mean: np.ndarray     # E[θ] (K, p, 1+q)
    second: np.ndarray        # E[θθᵀ] (K, p, 1+q, 1+q)
    log_weights: np.ndarray   # E[log w] (K,)


def layer_moments(state: VariationalState) -> List[LayerMoments]:
    return [
        LayerMoments(
            inv_noise=layer.noise.inv_mean,
            log_noise=layer.noise.log_mean,
            coef_mean=layer.coef_mean,
            second=layer.second_moment(),
            log_weights=dirichlet_log_mean(layer.dirichlet),
        )
        for layer in state.layers
    ]


def _augment(mean: np.ndarray, var: np.ndarray):
    """x = (1, z) and its elementwise variance (0, v)."""
    ones = np.ones((mean.shape[0], 1))
    return np.hstack([ones, mean]), np.hstack([np.zeros_like(ones), var])


def predicted_outputs(moments: LayerMoments, input_mean: np.ndarray) -> np.ndarray:
    """E[μ_kj + B_kj· z] for every subject, component and row: (n, K, p)."""
    x_mean = np.hstack([np.ones((input_mean.shape[0], 1)), input_mean])
    return np.einsum('kjc,nc->nkj', moments.coef_mean, x_mean)


def expected_sq_residual(moments: LayerMoments, out_mean, out_var, in_mean, in_var) -> np.ndarray:
    """E[(u_j - μ_kj - B_kj· z)²] under q: (n, K, p)."""
    x_mean, x_var = _augment(in_mean, in_var)
    cross = np.einsum('kjc,nc->nkj', moments.coef_mean, x_mean)
    quad = np.einsum('nc,kjcd,nd->nkj', x_mean, moments.second, x_mean)
    quad += np.einsum('kjc,nc->nkj', np.diagonal(moments.second, axis1=2, axis2=3), x_var)
    sq = (out_mean ** 2 + out_var)[:, None, :]
    return sq - 2.0 * out_mean[:, None, :] * cross + quad


def layer_log_terms(moments: LayerMoments, residual: np.ndarray) -> np.ndarray:
    """Σ_j E[log N(u_j; μ_kj + B_kj· z, δ_kj)] per subject and component: (n, K)."""
    terms = LOG_2PI + moments.log_noise[None] + moments.inv_noise[None] * residual
    return -0.5 * terms.sum(axis=2)


def path_logits(layer_logits: List[np.ndarray]) -> np.ndarray:
    """Sum of per-layer logits over every path, lexicographic: (n, Π K)."""
    logits = layer_logits[0]
    for extra in layer_logits[1:]:
        logits = (logits[:, :, None] + extra[:, None, :]).reshape(logits.shape[0], -1)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(logits - special.logsumexp(logits, axis=1, keepdims=True))


def expected_residual_norm(designs: SubjectDesigns, idx, beta_mean, beta_var) -> np.ndarray:
    """E‖y_i - X_i β_i‖² under q(β_i)."""
    gram = designs.gram[idx]
    return (designs.sq_norm[idx]
            - 2.0 * np.einsum('nd,nd->n', beta_mean, designs.cross[idx])
            + np.einsum('nc,ncd,nd->n', beta_mean, gram, beta_mean)
            + np.einsum('ndd,nd->n', gram, beta_var))


def local_terms(state: VariationalState, designs: SubjectDesigns, indices, moments=None) -> np.ndarray:
    """
    The ELBO contribution ℓ_i of each indexed subject: every expectation
    involving its local factors plus their entropies.
    """
    idx = np.asarray(indices, dtype=int)
    moments = moments or layer_moments(state)
    means = [m[idx] for m in state.latent_mean]
    variances = [v[idx] for v in state.latent_var]
    resp = state.resp[idx]
    counts = designs.counts[idx]

    total = (-0.5 * counts * (LOG_2PI + state.sigma2.log_mean)
             - 0.5 * state.sigma2.inv_mean * expected_residual_norm(designs, idx, means[0], variances[0]))
    for layer, (mom, rho) in enumerate(zip(moments, state.layer_marginals(idx))):
        residual = expected_sq_residual(mom, means[layer], variances[layer], means[layer + 1],
                                        variances[layer + 1])
        total += (rho * (layer_log_terms(mom, residual) + mom.log_weights[None])).sum(axis=1)
    top_mean, top_var = means[-1], variances[-1]
    total += -0.5 * (top_mean.shape[1] * LOG_2PI + (top_mean ** 2 + top_var).sum(axis=1))
    for var in variances:
        total += 0.5 * (LOG_2PI + 1.0 + np.log(var)).sum(axis=1)
    total += special.entr(resp).sum(axis=1)
    return total


def _diagonal_gaussian(precision: np.ndarray, linear: np.ndarray):
    """Optimal mean-field Gaussian for a quadratic log-density: Λ⁻¹b and 1/diag Λ."""
    mean = np.linalg.solve(precision, linear[..., None])[..., 0]
    var = np.maximum(1.0 / np.diagonal(precision, axis1=1, axis2=2), positivity_floor())
    return mean, var


def _output_terms(mom: LayerMoments, rho: np.ndarray, in_mean: np.ndarray):
    """Precision diagonal and linear term from a level's role as layer output."""
    cross = predicted_outputs(mom, in_mean)
    diag = rho @ mom.inv_noise
    linear = np.einsum('nk,kj,nkj->nj', rho, mom.inv_noise, cross)
    return diag, linear


def _input_terms(mom: LayerMoments, rho: np.ndarray, out_mean: np.ndarray):
    """Precision and linear term from a level's role as the input z of a layer."""
    second = mom.second
    precision = np.einsum('nk,kj,kjcd->ncd', rho, mom.inv_noise, second[:, :, 1:, 1:])
    linear = (np.einsum('nk,kj,nj,kjc->nc', rho, mom.inv_noise, out_mean, mom.coef_mean[:, :, 1:])
              - np.einsum('nk,kj,kjc->nc', rho, mom.inv_noise, second[:, :, 1:, 0]))
    return precision, linear


def sweep(state: VariationalState, designs: SubjectDesigns, indices, moments=None):
    """One pass over β_i, z_i^(1..L) then r_i for the indexed subjects."""
    idx = np.asarray(indices, dtype=int)
    moments = moments or layer_moments(state)
    n_layers = state.arch.n_layers
    rho = state.layer_marginals(idx)
    means = [m[idx] for m in state.latent_mean]
    variances = [v[idx] for v in state.latent_var]

    diag, linear = _output_terms(moments[0], rho[0], means[1])
    precision = state.sigma2.inv_mean * designs.gram[idx]
    precision = precision + diag[:, :, None] * np.eye(diag.shape[1])[None]
    linear = linear + state.sigma2.inv_mean * designs.cross[idx]
    means[0], variances[0] = _diagonal_gaussian(precision, linear)

    for level in range(1, n_layers + 1):
        precision, linear = _input_terms(moments[level - 1], rho[level - 1], means[level - 1])
        if level < n_layers:
            diag, extra = _output_terms(moments[level], rho[level], means[level + 1])
            linear = linear + extra
        else:
            diag = np.ones(precision.shape[:2])
        precision = precision + diag[:, :, None] * np.eye(diag.shape[1])[None]
        means[level], variances[level] = _diagonal_gaussian(precision, linear)

    layer_logits = []
    for layer, mom in enumerate(moments):
        residual = expected_sq_residual(mom, means[layer], variances[layer], means[layer + 1],
                                        variances[layer + 1])
        layer_logits.append(layer_log_terms(mom, residual) + mom.log_weights[None])

    for level in range(n_layers + 1):
        state.latent_mean[level][idx] = means[level]
        state.latent_var[level][idx] = variances[level]
    state.resp[idx] = softmax(path_logits(layer_logits))


def _optimize_chunk(state, designs, indices, config: FitConfig, moments) -> int:
    active = np.asarray(indices, dtype=int)
    current = local_terms(state, designs, active, moments)
    sweeps = 0
    while active.size and sweeps < config.local_max_sweeps:
        sweep(state, designs, active, moments)
        sweeps += 1
        updated = local_terms(state, designs, active, moments)
        improving = (updated - current) >= config.local_tolerance
        active, current = active[improving], updated[improving]
    return sweeps


def optimize_local(state: VariationalState, data, indices, config: FitConfig) -> VariationalState:
    """
    Coordinate ascent for the indexed subjects with the global factors
    frozen. A subject stops once one sweep improves its ℓ_i by less than
    config.local_tolerance, or after config.local_max_sweeps sweeps.
    """
    designs = as_designs(data, state.basis)
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        return state
    moments = layer_moments(state)

    if config.threads == 1 or idx.size < 2 * config.threads:
        sweeps = _optimize_chunk(state, designs, idx, config, moments)
    else:
        chunks = np.array_split(idx, config.threads)
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            sweeps = max(pool.map(lambda chunk: _optimize_chunk(state, designs, chunk, config, moments),
                                  chunks))
    logger.debug(f"Local step over {idx.size} subjects took at most {sweeps} sweeps")
    return state
