"""
Data-driven starting point for the variational factors.

Per-subject ridge estimates of β are clustered layer by layer; each
cluster's residual principal directions give its loadings and the
resulting factor scores feed the next layer.
"""
import logging

import numpy as np
from scipy import linalg
from sklearn.cluster import KMeans

from dmfa.architecture import DmfaArchitecture, require_valid
from dmfa.params import PriorHyper
from dmlmm.exceptions import ContractViolation
from .factors import InverseGamma, cauchy_variance_prior, positivity_floor
from .state import (
    FitConfig, LayerFactors, SubjectDesigns, VariationalState, as_designs, coefficient_mask,
)

logger = logging.getLogger(__name__)

KMEANS_RESTARTS = 10
# Relative floor on initial noise variances against the spread of the layer input
NOISE_FLOOR = 1e-3


def ridge_estimates(designs: SubjectDesigns, ridge: float) -> np.ndarray:
    """β̂_i = (X_iᵀX_i + ridge I)⁻¹ X_iᵀy_i for every subject."""
    eye = np.eye(designs.dimension)
    return np.linalg.solve(designs.gram + ridge * eye[None], designs.cross[..., None])[..., 0]


def cluster(points: np.ndarray, n_clusters: int, seed: int):
    """
    K-means labels and centroids. When there are fewer distinct points than
    clusters the extra centroids copy randomly chosen points.
    """
    n = points.shape[0]
    if n_clusters == 1:
        return np.zeros(n, dtype=int), points.mean(axis=0, keepdims=True)
    distinct = np.unique(points, axis=0).shape[0]
    fitted = min(n_clusters, distinct)
    if fitted == 1:
        labels, centroids = np.zeros(n, dtype=int), points.mean(axis=0, keepdims=True)
    else:
        model = KMeans(n_clusters=fitted, n_init=KMEANS_RESTARTS, random_state=seed).fit(points)
        labels, centroids = model.labels_.astype(int), model.cluster_centers_
    if fitted < n_clusters:
        rng = np.random.default_rng(seed)
        extra = points[rng.integers(0, n, size=n_clusters - fitted)]
        centroids = np.vstack([centroids, extra])
        logger.info(f"Only {fitted} distinct clusters for {n_clusters} components; "
                    f"duplicated {n_clusters - fitted} centroids")
    return labels, centroids


def lower_loadings(residuals: np.ndarray, factor_dim: int) -> np.ndarray:
    """
    Leading principal directions of the residuals scaled by their standard
    deviations, rotated to lower-triangular form.
    """
    count, dim = residuals.shape
    loadings = np.zeros((dim, factor_dim))
    if count < 2:
        return loadings
    _, singular, vt = np.linalg.svd(residuals, full_matrices=False)
    rank = min(factor_dim, singular.shape[0])
    loadings[:, :rank] = vt[:rank].T * singular[:rank] / np.sqrt(count)
    # W = L Q with L lower triangular, from the QR factorization of Wᵀ
    _, upper = linalg.qr(loadings.T, mode='economic')
    lower = upper.T
    if lower.shape[1] < factor_dim:
        lower = np.hstack([lower, np.zeros((dim, factor_dim - lower.shape[1]))])
    return np.tril(lower[:, :factor_dim])


def factor_scores(loadings: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Posterior means of z under u = L z + noise with z ~ N(0, I)."""
    factor_dim = loadings.shape[1]
    return np.linalg.solve(loadings.T @ loadings + np.eye(factor_dim), loadings.T @ residuals.T).T


def _initial_layer(latent: np.ndarray, arch: DmfaArchitecture, layer: int, config: FitConfig):
    n_components, input_dim, factor_dim = arch.layer_shape(layer)
    labels, centroids = cluster(latent, n_components, config.seed + layer)
    spread = max(float(latent.var(axis=0).mean()), 1.0)
    floor = max(NOISE_FLOOR * spread, positivity_floor())

    loadings = np.zeros((n_components, input_dim, factor_dim))
    noise = np.full((n_components, input_dim), spread)
    scores = np.zeros((latent.shape[0], factor_dim))
    score_var = np.ones((latent.shape[0], factor_dim))
    counts = np.bincount(labels, minlength=n_components).astype(float)
    for k in range(n_components):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            continue
        residuals = latent[members] - centroids[k]
        loadings[k] = lower_loadings(residuals, factor_dim)
        scores[members] = factor_scores(loadings[k], residuals)
        fit = residuals - scores[members] @ loadings[k].T
        if members.size > 1:
            noise[k] = np.maximum(np.mean(fit ** 2, axis=0), floor)
        score_var[members] = 1.0 / (1.0 + (loadings[k] ** 2 / noise[k][:, None]).sum(axis=0))
    return labels, centroids, loadings, noise, counts, scores, score_var


def initial_factors(centroids, loadings, noise, counts, hyper: PriorHyper, concentration: float) -> LayerFactors:
    n_components, input_dim, factor_dim = loadings.shape
    mask = coefficient_mask(input_dim, factor_dim)
    coef_mean = np.concatenate([centroids[:, :, None], loadings], axis=2) * mask[None]
    row_var = noise / np.maximum(counts, 1.0)[:, None]
    coef_cov = np.zeros((n_components, input_dim, 1 + factor_dim, 1 + factor_dim))
    diag = np.broadcast_to(row_var[:, :, None], coef_mean.shape) * mask[None]
    for c in range(1 + factor_dim):
        coef_cov[:, :, c, c] = diag[:, :, c]

    noise_factor = InverseGamma.from_mean(noise, shape=1.5 + 0.5 * np.maximum(counts, 1.0)[:, None])
    noise_mixing = InverseGamma(np.ones_like(noise), noise_factor.inv_mean + hyper.noise_scale ** -2)
    mean_prior = cauchy_variance_prior(hyper.mean_scale)
    mean_scale = InverseGamma(np.full(noise.shape, mean_prior.shape + 0.5),
                              mean_prior.rate + 0.5 * (coef_mean[:, :, 0] ** 2 + row_var))
    loading_sq = loadings ** 2 + np.broadcast_to(row_var[:, :, None], loadings.shape)
    local_mixing = InverseGamma(np.ones_like(loadings), np.full(loadings.shape, 2.0))
    local_scale = InverseGamma(np.ones_like(loadings), local_mixing.inv_mean + 0.5 * loading_sq)
    global_mixing = InverseGamma(np.ones(n_components), np.full(n_components, 1.0 + hyper.horseshoe_scale ** -2))
    free = mask[:, 1:]
    weighted = (local_scale.inv_mean * loading_sq * free[None]).sum(axis=(1, 2))
    global_scale = InverseGamma(np.full(n_components, 0.5 + 0.5 * free.sum()),
                                global_mixing.inv_mean + 0.5 * weighted)
    return LayerFactors(
        coef_mean=coef_mean,
        coef_cov=coef_cov,
        noise=noise_factor,
        noise_mixing=noise_mixing,
        mean_scale=mean_scale,
        local_scale=local_scale,
        local_mixing=local_mixing,
        global_scale=global_scale,
        global_mixing=global_mixing,
        dirichlet=concentration + counts,
    )


def init_state(data, arch: DmfaArchitecture, config: FitConfig) -> VariationalState:
    """
    Starting variational state: q(β_i) centred on the ridge estimate,
    clustered layer factors, uniform path responsibilities.
    """
    require_valid(arch)
    if arch.input_dim != config.basis.dimension:
        raise ContractViolation(
            f"architecture input dimension {arch.input_dim} differs from basis dimension "
            f"{config.basis.dimension}",
        )
    designs = as_designs(data, config.basis)
    n = designs.n_subjects
    hyper = config.hyper
    concentration = hyper.concentration(arch)

    beta = ridge_estimates(designs, config.ridge)
    residual = (designs.sq_norm - 2.0 * np.einsum('nd,nd->n', beta, designs.cross)
                + np.einsum('nc,ncd,nd->n', beta, designs.gram, beta))
    spread = float(np.var(np.concatenate(designs.values))) or 1.0
    sigma2 = max(float(residual.sum() / designs.counts.sum()), NOISE_FLOOR * spread)

    layers, latent_mean, latent_var = [], [beta], []
    latent, beta_noise = beta, None
    for layer in range(arch.n_layers):
        labels, centroids, loadings, noise, counts, scores, score_var = _initial_layer(
            latent, arch, layer, config,
        )
        layers.append(initial_factors(centroids, loadings, noise, counts, hyper, concentration[layer]))
        latent_mean.append(scores)
        latent_var.append(score_var)
        if beta_noise is None:
            beta_noise = noise[labels]
        latent = scores

    beta_var = 1.0 / (np.diagonal(designs.gram, axis1=1, axis2=2) / sigma2 + 1.0 / beta_noise)
    latent_var.insert(0, np.maximum(beta_var, positivity_floor()))
    logger.info(f"Initialized {arch} on {n} subjects with sigma2={sigma2:.4g}")
    return VariationalState(
        arch=arch,
        hyper=hyper,
        basis=config.basis,
        sigma2=InverseGamma.from_mean(sigma2, shape=max(2.0, 0.5 + 0.5 * designs.counts.sum())),
        psi=InverseGamma(1.0, 1.0 / sigma2 + hyper.noise_scale ** -2),
        layers=layers,
        latent_mean=latent_mean,
        latent_var=latent_var,
        resp=np.full((n, arch.n_paths), 1.0 / arch.n_paths),
        subject_ids=designs.ids,
        iteration=0,
    )
