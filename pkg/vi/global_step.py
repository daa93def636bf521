"""
Stochastic natural-gradient step on the global factors.

Each factor is moved a step a_m toward its coordinate-ascent target built
from minibatch statistics scaled by n/|S|. Factors are updated in a fixed
order and every target uses the latest values of the factors before it.
"""
import logging
from typing import NamedTuple

import numpy as np
from scipy import linalg

from dmlmm.exceptions import ContractViolation
from gmm.linalg import stable_cholesky, symmetrize
from .factors import cauchy_variance_prior
from .local import expected_residual_norm
from .state import FitConfig, LayerFactors, SubjectDesigns, VariationalState, as_designs

logger = logging.getLogger(__name__)


class LayerStatistics(NamedTuple):
    counts: np.ndarray      # N_k (K,)
    xx: np.ndarray          # Σ ρ E[x xᵀ] (K, 1+q, 1+q)
    xu: np.ndarray          # Σ ρ E[u_j] E[x] (K, p, 1+q)
    uu: np.ndarray          # Σ ρ E[u_j²] (K, p)


def layer_statistics(state: VariationalState, layer: int, indices, scale: float) -> LayerStatistics:
    idx = np.asarray(indices, dtype=int)
    rho = state.layer_marginals(idx)[layer]
    out_mean, out_var = state.latent_mean[layer][idx], state.latent_var[layer][idx]
    in_mean, in_var = state.latent_mean[layer + 1][idx], state.latent_var[layer + 1][idx]
    x_mean = np.hstack([np.ones((idx.size, 1)), in_mean])
    x_var = np.hstack([np.zeros((idx.size, 1)), in_var])
    outer = np.einsum('nc,nd->ncd', x_mean, x_mean)
    outer += x_var[:, :, None] * np.eye(x_var.shape[1])[None]
    return LayerStatistics(
        counts=scale * rho.sum(axis=0),
        xx=scale * np.einsum('nk,ncd->kcd', rho, outer),
        xu=scale * np.einsum('nk,nj,nc->kjc', rho, out_mean, x_mean),
        uu=scale * np.einsum('nk,nj->kj', rho, out_mean ** 2 + out_var),
    )


def _update_rows(factors: LayerFactors, stats: LayerStatistics, step: float):
    """Joint Gaussian over each row's active (μ_kj, B_kj·)."""
    mask = factors.mask
    inv_noise = factors.noise.inv_mean
    loading_precision = factors.local_scale.inv_mean * factors.global_scale.inv_mean[:, None, None]
    for k in range(factors.n_components):
        for j in range(factors.input_dim):
            active = np.flatnonzero(mask[j])
            prior = np.concatenate([[factors.mean_scale.inv_mean[k, j]],
                                    loading_precision[k, j, active[1:] - 1]])
            precision = np.diag(prior) + inv_noise[k, j] * stats.xx[k][np.ix_(active, active)]
            linear = inv_noise[k, j] * stats.xu[k, j, active]
            eye = np.eye(active.size)
            if step < 1.0:
                old_cov = factors.coef_cov[k, j][np.ix_(active, active)]
                old_chol = stable_cholesky(old_cov, label=f'row covariance ({k}, {j})')
                old_precision = linalg.cho_solve((old_chol, True), eye)
                old_linear = old_precision @ factors.coef_mean[k, j, active]
                precision = (1.0 - step) * old_precision + step * precision
                linear = (1.0 - step) * old_linear + step * linear
            chol = stable_cholesky(symmetrize(precision), label=f'row precision ({k}, {j})')
            cov = symmetrize(linalg.cho_solve((chol, True), eye))
            factors.coef_cov[k, j] = 0.0
            factors.coef_cov[k, j][np.ix_(active, active)] = cov
            factors.coef_mean[k, j] = 0.0
            factors.coef_mean[k, j, active] = cov @ linear


def _update_noise(factors: LayerFactors, stats: LayerStatistics, hyper, step: float):
    second = factors.second_moment()
    expected = (stats.uu - 2.0 * np.einsum('kjc,kjc->kj', factors.coef_mean, stats.xu)
                + np.einsum('kjcd,kdc->kj', second, stats.xx))
    factors.noise.blend(0.5 + 0.5 * stats.counts[:, None] * np.ones_like(expected),
                        factors.noise_mixing.inv_mean + 0.5 * expected, step)
    factors.noise_mixing.blend(np.ones_like(expected),
                               factors.noise.inv_mean + 1.0 / hyper.noise_scale ** 2, step)


def _update_mean_scales(factors: LayerFactors, hyper, step: float):
    mean_sq = factors.second_moment()[:, :, 0, 0]
    prior = cauchy_variance_prior(hyper.mean_scale)
    factors.mean_scale.blend(np.full(mean_sq.shape, prior.shape + 0.5), prior.rate + 0.5 * mean_sq, step)


def _update_horseshoe(factors: LayerFactors, hyper, step: float):
    mask = factors.loading_mask
    loading_sq = np.diagonal(factors.second_moment(), axis1=2, axis2=3)[:, :, 1:]
    ones = np.ones_like(loading_sq)
    factors.local_scale.blend(
        ones,
        factors.local_mixing.inv_mean + 0.5 * factors.global_scale.inv_mean[:, None, None] * loading_sq,
        step,
    )
    factors.local_mixing.blend(ones, factors.local_scale.inv_mean + 1.0, step)
    weighted = (factors.local_scale.inv_mean * loading_sq * mask[None]).sum(axis=(1, 2))
    factors.global_scale.blend(
        0.5 + 0.5 * mask.sum() * np.ones(factors.n_components),
        factors.global_mixing.inv_mean + 0.5 * weighted,
        step,
    )
    factors.global_mixing.blend(
        np.ones(factors.n_components),
        factors.global_scale.inv_mean + 1.0 / hyper.horseshoe_scale ** 2,
        step,
    )


def _update_weights(factors: LayerFactors, stats: LayerStatistics, concentration: float, step: float):
    target = concentration + stats.counts
    factors.dirichlet = (1.0 - step) * factors.dirichlet + step * target


def _update_observation_noise(state: VariationalState, designs: SubjectDesigns, idx, scale, step):
    residual = expected_residual_norm(designs, idx, state.latent_mean[0][idx], state.latent_var[0][idx])
    state.sigma2.blend(0.5 + 0.5 * scale * designs.counts[idx].sum(),
                       state.psi.inv_mean + 0.5 * scale * residual.sum(), step)
    state.psi.blend(1.0, state.sigma2.inv_mean + 1.0 / state.hyper.noise_scale ** 2, step)


def step_global(state: VariationalState, data, minibatch, config: FitConfig, iteration: int,
                step: float = None) -> VariationalState:
    """
    Move every global factor toward its minibatch target with step
    a_m = config.step_size(iteration) unless an explicit step is given.
    A zero step leaves the state unchanged.
    """
    designs = as_designs(data, state.basis)
    idx = np.asarray(minibatch, dtype=int)
    if designs.n_subjects != state.n_subjects:
        raise ContractViolation("dataset and variational state cover different subjects")
    if idx.size == 0:
        raise ContractViolation("minibatch must contain at least one subject")
    step = config.step_size(iteration) if step is None else float(step)
    if not 0.0 <= step <= 1.0:
        raise ContractViolation(f"step size {step} outside [0, 1]")
    if step == 0.0:
        return state

    scale = state.n_subjects / idx.size
    hyper = state.hyper
    concentration = hyper.concentration(state.arch)
    _update_observation_noise(state, designs, idx, scale, step)
    for layer, factors in enumerate(state.layers):
        stats = layer_statistics(state, layer, idx, scale)
        _update_rows(factors, stats, step)
        _update_noise(factors, stats, hyper, step)
        _update_mean_scales(factors, hyper, step)
        _update_horseshoe(factors, hyper, step)
        _update_weights(factors, stats, concentration[layer], step)
    logger.debug(f"Global step {iteration} with a={step:.4f} over {idx.size} subjects")
    state.iteration = iteration + 1
    return state
