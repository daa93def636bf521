"""
DMFA prior operations: collapse to a Gaussian mixture, ancestral sampling
and log-prior evaluation.
"""
import logging
from typing import Tuple

import numpy as np
from scipy import special, stats

from dmlmm.exceptions import ContractViolation
from gmm.linalg import symmetrize
from gmm.mixture import GaussianMixture
from .architecture import enumerate_paths
from .params import DmfaParams, PriorAuxiliary, PriorHyper, tril_mask

logger = logging.getLogger(__name__)


def collapse(params: DmfaParams) -> GaussianMixture:
    """
    The Gaussian mixture over β implied by the layered model, one component
    per path (k_1, ..., k_L) in lexicographic order.

    For a path the running product A = B_{k_1} ... B_{k_{l-1}} maps layer-l
    means and noise down to β; the top factor z^(L) ~ N(0, I) contributes
    (B_{k_1} ... B_{k_L})(B_{k_1} ... B_{k_L})ᵀ.
    """
    layers = params.layers
    paths = enumerate_paths(params.architecture)
    dim = params.dimension
    weights = np.empty(len(paths))
    means = np.empty((len(paths), dim))
    covs = np.empty((len(paths), dim, dim))

    for index, path in enumerate(paths):
        weight = 1.0
        mean = np.zeros(dim)
        cov = np.zeros((dim, dim))
        transfer = np.eye(dim)
        for layer, k in zip(layers, path):
            weight *= layer.weights[k]
            mean += transfer @ layer.means[k]
            cov += (transfer * layer.noise[k]) @ transfer.T
            transfer = transfer @ layer.loadings[k]
        cov += transfer @ transfer.T
        weights[index] = weight
        means[index] = mean
        covs[index] = symmetrize(cov)

    return GaussianMixture(weights / weights.sum(), means, covs)


def sample_paths(params: DmfaParams, count: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    """
    Top-down ancestral draws. Returns β (count, D^(0)) and the chosen
    component of every layer (count, L).
    """
    rng = np.random.default_rng(seed)
    layers = params.layers
    z = rng.standard_normal((count, layers[-1].factor_dim))
    labels = np.empty((count, len(layers)), dtype=int)
    for position in range(len(layers) - 1, -1, -1):
        layer = layers[position]
        chosen = rng.choice(layer.n_components, size=count, p=layer.weights)
        labels[:, position] = chosen
        noise = rng.standard_normal((count, layer.input_dim)) * np.sqrt(layer.noise[chosen])
        z = layer.means[chosen] + np.einsum('nij,nj->ni', layer.loadings[chosen], z) + noise
    return z, labels


def sample_beta(params: DmfaParams, count: int, seed) -> np.ndarray:
    return sample_paths(params, count, seed)[0]


def path_index(params: DmfaParams, labels: np.ndarray) -> np.ndarray:
    """Position of each label row in the lexicographic path list."""
    return np.ravel_multi_index(np.asarray(labels).T, params.architecture.components)


def _half_cauchy_pair(values, mixing, scale) -> float:
    """log IG(values; 1/2, 1/mixing) + log IG(mixing; 1/2, 1/scale²)."""
    return float(
        stats.invgamma.logpdf(values, 0.5, scale=1.0 / mixing).sum()
        + stats.invgamma.logpdf(mixing, 0.5, scale=1.0 / scale ** 2).sum()
    )


def log_dirichlet(weights, concentration: float) -> float:
    weights = np.asarray(weights, dtype=float)
    alpha = np.full(weights.shape[0], concentration)
    with np.errstate(divide='ignore', invalid='ignore'):
        kernel = np.where(alpha == 1.0, 0.0, (alpha - 1.0) * np.log(weights))
    return float(special.gammaln(alpha.sum()) - special.gammaln(alpha).sum() + kernel.sum())


def log_prior(params: DmfaParams, hyper: PriorHyper, aux: PriorAuxiliary) -> float:
    """
    Joint log density of the DMFA parameters and their auxiliary scales.

    Cauchy(0, mean_scale) on every mean entry; half-Cauchy(noise_scale) on
    each noise standard deviation through the IG-IG pair; horseshoe on the
    free loading entries (normal with variance λ² τ², each scale half-Cauchy
    through its IG-IG pair, τ with scale horseshoe_scale); Dirichlet on the
    weights of every layer.
    """
    arch = params.architecture
    concentration = hyper.concentration(arch)
    if len(aux.layers) != arch.n_layers:
        raise ContractViolation("auxiliary scales do not match the number of layers")

    total = 0.0
    for layer, layer_aux, alpha in zip(params.layers, aux.layers, concentration):
        if (layer_aux.local_scales.shape != layer.loadings.shape
                or layer_aux.noise_mixing.shape != layer.noise.shape):
            raise ContractViolation("auxiliary scales do not match the parameter shapes")
        mask = tril_mask(layer.input_dim, layer.factor_dim)
        total += float(stats.cauchy.logpdf(layer.means, scale=hyper.mean_scale).sum())
        total += _half_cauchy_pair(layer.noise, layer_aux.noise_mixing, hyper.noise_scale)

        variance = layer_aux.local_scales * layer_aux.global_scales[:, None, None]
        free = np.broadcast_to(mask, layer.loadings.shape)
        total += float(stats.norm.logpdf(
            layer.loadings[free], scale=np.sqrt(variance[free])).sum())
        total += _half_cauchy_pair(
            layer_aux.local_scales[free], layer_aux.local_mixing[free], 1.0)
        total += _half_cauchy_pair(
            layer_aux.global_scales, layer_aux.global_mixing, hyper.horseshoe_scale)
        total += log_dirichlet(layer.weights, alpha)
    return total
