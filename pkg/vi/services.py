"""
Fitting loop, plug-in extraction and architecture selection.
"""
import logging
import time
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dmfa.architecture import DmfaArchitecture
from dmfa.params import DmfaParams
from dmfa.services import collapse
from dmlmm.exceptions import ContractViolation, DmlmmError, NumericalFailure
from gmm.mixture import renormalize
from predict.plugin import PluginParams
from .global_step import step_global
from .initialization import init_state
from .local import optimize_local
from .objective import elbo
from .state import FitConfig, FitResult, VariationalState, as_designs

logger = logging.getLogger(__name__)

# Trailing share of the ELBO trace averaged when scoring architectures
SCORE_TAIL = 0.1


def minibatch_indices(n_subjects: int, size: int, seed: int, iteration: int) -> np.ndarray:
    """Subjects drawn without replacement for one iteration, reproducible on resume."""
    rng = np.random.default_rng([seed, iteration])
    return np.sort(rng.choice(n_subjects, size=size, replace=False))


def _finite_state(state: VariationalState) -> bool:
    arrays = [state.sigma2.shape, state.sigma2.rate, state.psi.rate, state.resp]
    arrays += state.latent_mean + state.latent_var
    for layer in state.layers:
        arrays += [layer.coef_mean, layer.coef_cov, layer.noise.rate, layer.dirichlet]
    return all(np.all(np.isfinite(a)) for a in arrays)


def fit(data, arch: DmfaArchitecture, config: FitConfig,
        state: Optional[VariationalState] = None) -> FitResult:
    """
    Stochastic variational inference: each iteration optimizes the local
    factors of a minibatch, records the minibatch ELBO estimate and takes a
    global step. Passing a state resumes from its iteration counter.
    The plug-in is extracted after refreshing every subject's local factors.

    Raises:
        NumericalFailure: carrying a snapshot of the last finite state
    """
    started = time.perf_counter()
    designs = as_designs(data, config.basis)
    if state is None:
        state = init_state(designs, arch, config)
    elif state.arch != arch or state.subject_ids != designs.ids:
        raise ContractViolation("resumed state does not match the architecture or dataset")
    batch = config.batch_size(designs.n_subjects)
    trace: List[float] = []

    first = state.iteration
    for iteration in range(first, first + config.max_iterations):
        snapshot = state.copy()
        indices = minibatch_indices(designs.n_subjects, batch, config.seed, iteration)
        try:
            optimize_local(state, designs, indices, config)
            value = elbo(state, designs, subset=indices)
            step_global(state, designs, indices, config, iteration)
        except NumericalFailure as err:
            err.snapshot = snapshot
            logger.error(f"Numerical failure at iteration {iteration}: {err.message}")
            raise
        if not _finite_state(state):
            raise NumericalFailure(f"non-finite variational state after iteration {iteration}",
                                   label='global_step', snapshot=snapshot, iteration=iteration)
        trace.append(value)
        if config.log_every and (iteration + 1) % config.log_every == 0:
            logger.info(f"Iteration {iteration + 1}: elbo={value:.6g} "
                        f"step={config.step_size(iteration):.4g}")

    # The returned state is left exactly as the last iteration produced it
    final = optimize_local(state.copy(), designs, np.arange(designs.n_subjects), config)
    plugin = prune_and_plugin(final, config)
    diagnostics = {
        'iterations': state.iteration,
        'final_elbo': elbo(final, designs),
        'pruning': pruning_report(final, config),
        'wall_time': time.perf_counter() - started,
    }
    logger.info(f"Fit of {arch} finished after {state.iteration} iterations, "
                f"{plugin.beta_prior.n_components} components kept")
    return FitResult(state=state, elbo_trace=np.array(trace), plugin=plugin, diagnostics=diagnostics)


def plugin_dmfa(state: VariationalState) -> DmfaParams:
    """Posterior means of the layer parameters."""
    weights, means, loadings, noise = [], [], [], []
    for layer in state.layers:
        weights.append(layer.dirichlet / layer.dirichlet.sum())
        means.append(layer.coef_mean[:, :, 0])
        loadings.append(layer.coef_mean[:, :, 1:])
        noise.append(layer.noise.mean)
    return DmfaParams.build(state.arch, weights, means, loadings, noise)


def _path_keep(state: VariationalState, weights: np.ndarray, threshold: float) -> np.ndarray:
    mass = state.resp.sum(axis=0)
    return (weights >= threshold) & (mass >= 1.0)


def prune_and_plugin(state: VariationalState, config: FitConfig) -> PluginParams:
    """
    Collapse the posterior-mean parameters and drop paths whose weight is
    below config.prune_threshold or whose total responsibility is under one
    subject; survivors are renormalized.
    """
    mixture = collapse(plugin_dmfa(state))
    keep = _path_keep(state, mixture.weights, config.prune_threshold)
    if not keep.any():
        raise ContractViolation(
            f"every path was pruned at threshold {config.prune_threshold}",
            threshold=config.prune_threshold,
        )
    return PluginParams(
        beta_prior=renormalize(mixture, keep),
        sigma2=float(state.sigma2.mean),
        basis=state.basis,
    )


def pruning_report(state: VariationalState, config: FitConfig) -> dict:
    weights = collapse(plugin_dmfa(state)).weights
    keep = _path_keep(state, weights, config.prune_threshold)
    return {
        'threshold': config.prune_threshold,
        'paths': int(state.arch.n_paths),
        'kept': [int(i) for i in np.flatnonzero(keep)],
        'weights': [float(w) for w in weights],
        'responsibility_mass': [float(m) for m in state.resp.sum(axis=0)],
    }


def _score(trace: np.ndarray) -> float:
    tail = max(1, int(np.ceil(SCORE_TAIL * trace.shape[0])))
    return float(np.mean(trace[-tail:]))


def score_architectures(data, candidates: Sequence[DmfaArchitecture], short_iters: int,
                        config: FitConfig) -> List[Tuple[DmfaArchitecture, Optional[float], str]]:
    """
    A fit of short_iters iterations for every candidate with the shared seed. Each entry is
    (architecture, score or None, error message or '').
    """
    if not candidates:
        raise ContractViolation("no candidate architectures")
    if short_iters < 1:
        raise ContractViolation("architecture selection needs at least one iteration")
    config = replace(config, max_iterations=short_iters)
    designs = as_designs(data, config.basis)
    scores = []
    for arch in candidates:
        try:
            result = fit(designs, arch, config)
        except DmlmmError as err:
            logger.warning(f"Candidate {arch} failed: {err.message}")
            scores.append((arch, None, err.message))
            continue
        score = _score(result.elbo_trace)
        logger.info(f"Candidate {arch} scored {score:.6g}")
        scores.append((arch, score if np.isfinite(score) else None, ''))
    return scores


def best_candidate(scores) -> DmfaArchitecture:
    """Highest score among the (architecture, score, message) entries; ties go to the earlier one."""
    best, best_score = None, -np.inf
    for arch, score, _ in scores:
        if score is not None and score > best_score:
            best, best_score = arch, score
    if best is None:
        raise ContractViolation("every candidate architecture failed to fit")
    return best


def select_architecture(data, candidates: Sequence[DmfaArchitecture], short_iters: int,
                        config: FitConfig) -> DmfaArchitecture:
    """
    The candidate with the highest mean ELBO over the last tenth of a short
    fit. Failed candidates are skipped; ties go to the earlier candidate.
    """
    return best_candidate(score_architectures(data, candidates, short_iters, config))
