"""
Factorization helpers implementing the jitter policy used across the project.
"""
import logging

import numpy as np
from scipy import linalg

from dmlmm.exceptions import NumericalFailure

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative jitter levels tried after a clean factorization fails
JITTER_LEVELS = (1e-9, 1e-6)


def _jitter_scale(matrix: np.ndarray) -> float:
    scale = float(np.trace(matrix)) / matrix.shape[0]
    return scale if scale > 0 else 1.0


def stable_cholesky(matrix: np.ndarray, label: str = 'matrix') -> np.ndarray:
    """
    Lower Cholesky factor of a symmetric matrix.

    A clean factorization is tried first; on failure the diagonal is loaded
    with 1e-9 and then 1e-6 times trace/D before giving up.

    Raises:
        NumericalFailure: if the matrix is not positive definite after jitter
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return linalg.cholesky(matrix, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass

    scale = _jitter_scale(matrix)
    eye = np.eye(matrix.shape[0])
    for level in JITTER_LEVELS:
        try:
            factor = linalg.cholesky(matrix + level * scale * eye, lower=True)
            logger.debug(f"Cholesky of {label} needed jitter {level * scale:.3e}")
            return factor
        except (linalg.LinAlgError, ValueError):
            continue
    raise NumericalFailure(
        f"{label} is not positive definite after jitter",
        label=label,
    )


def gaussian_logpdf(points: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of N(mean, chol cholᵀ) at each row of points."""
    centred = np.atleast_2d(points) - mean
    dim = chol.shape[0]
    if dim == 0:
        return np.zeros(centred.shape[0])
    solved = linalg.solve_triangular(chol, centred.T, lower=True)
    maha = np.einsum('ij,ij->j', solved, solved)
    return -0.5 * maha - np.log(np.diag(chol)).sum() - 0.5 * dim * LOG_2PI


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + np.swapaxes(matrix, -1, -2))
