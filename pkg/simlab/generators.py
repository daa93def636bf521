"""
Synthetic longitudinal datasets.

dgp1: two-group sinusoid with Karhunen-Loève functional errors.
dgp2: stochastic Van der Pol oscillator sampled at irregular times.
dgp3: sparse cosine/sine mixture with 36 parameter combinations.

Every generator is a pure function of its seed.
"""
import logging
from typing import Callable, Dict

import numpy as np

from dmlmm.exceptions import ContractViolation, DmlmmError, ErrorCode, NumericalFailure
from .dataset import LongitudinalDataset, SubjectRecord

logger = logging.getLogger(__name__)

DGP1_SUBJECTS = 600
DGP1_POINTS = 10
DGP1_XI_SD = np.array([0.1, 0.045, 0.01, 0.001])
DGP1_NOISE_SD = 0.3

DGP2_SUBJECTS = 100
DGP2_STEP = 1e-3
DGP2_WINDOW = (10.0, 20.0)
DGP2_POINTS = (15, 25)
DGP2_LOG_THETA = (1.0, 5.0)
DGP2_DIFFUSION = 0.5
DGP2_INITIAL = (1.0, 0.1)
BLOW_UP = 1e6
MAX_RESAMPLES = 100

DGP3_ROWS = 120
DGP3_POINTS = 40
DGP3_AMPLITUDES = (1.0, 0.1)
DGP3_COS_FREQ = (1, 2, 3)
DGP3_SIN_FREQ = (7, 8, 9)
DGP3_NOISE_SD = 0.1
DGP3_REMOVED = (15, 20)


def subject_id(index: int) -> str:
    return f's{index:05d}'


def _dataset(records, generator: str, seed, **params) -> LongitudinalDataset:
    metadata = {'generator': generator, 'seed': seed, 'params': params}
    return LongitudinalDataset(tuple(records), metadata)


def _distinct_uniform(rng, low: float, high: float, count: int) -> np.ndarray:
    times = np.unique(rng.uniform(low, high, size=count))
    while times.size < count:
        times = np.unique(np.concatenate([times, rng.uniform(low, high, size=count - times.size)]))
    return times


def dgp1_signal(labels, xi, times) -> np.ndarray:
    """g sin(4πt) + √2 Σ_k ξ_k sin(kπt) for rows of times."""
    times = np.atleast_2d(times)
    k = np.arange(1, xi.shape[1] + 1)
    functional = np.sqrt(2.0) * np.einsum('nk,ntk->nt', xi, np.sin(np.pi * times[..., None] * k))
    return labels[:, None] * np.sin(4 * np.pi * times) + functional


def gen_dgp1(n_subjects: int = DGP1_SUBJECTS, seed=0, n_holdout: int = 0) -> LongitudinalDataset:
    """Two groups with means ±sin(4πt); n_holdout extra points per subject are held out."""
    if n_subjects < 1 or n_holdout < 0:
        raise ContractViolation("dgp1 needs at least one subject and a non-negative holdout count")
    rng = np.random.default_rng(seed)
    total = DGP1_POINTS + n_holdout
    times = np.stack([_distinct_uniform(rng, 0.0, 1.0, total) for _ in range(n_subjects)])
    labels = rng.choice([-1, 1], size=n_subjects)
    xi = rng.normal(size=(n_subjects, DGP1_XI_SD.size)) * DGP1_XI_SD
    values = dgp1_signal(labels, xi, times) + rng.normal(scale=DGP1_NOISE_SD, size=times.shape)

    held = np.zeros(times.shape, dtype=bool)
    for i in range(n_subjects):
        held[i, rng.choice(total, size=n_holdout, replace=False)] = True
    records = [
        SubjectRecord(
            id=subject_id(i),
            times=times[i, ~held[i]],
            values=values[i, ~held[i]],
            holdout_times=times[i, held[i]],
            holdout_values=values[i, held[i]],
            label=int(labels[i]),
        )
        for i in range(n_subjects)
    ]
    logger.info(f"Generated dgp1 with {n_subjects} subjects (seed {seed})")
    return _dataset(records, 'dgp1', seed, n_subjects=n_subjects, n_holdout=n_holdout)


def van_der_pol_drift(theta: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    def drift(state):
        f, g = state[:, 0], state[:, 1]
        return np.stack([g, theta * (1.0 - f ** 2) * g - f], axis=1)
    return drift


def euler_maruyama(drift, initial, diffusion: float, record_times, step: float, rng):
    """
    Euler–Maruyama paths of dX = drift(X) dt + diffusion dW from t=0,
    linearly interpolated at record_times.

    Returns (values with shape (len(record_times), n_paths, dim), blown-up
    path mask). A path is frozen once a coordinate exceeds the blow-up level.
    """
    state = np.array(initial, dtype=float)
    record_times = np.asarray(record_times, dtype=float)
    if np.any(record_times < 0):
        raise ContractViolation("record times must be non-negative")
    n_steps = max(1, int(np.ceil(record_times.max() / step)))
    position = record_times / step
    lower = np.minimum(np.floor(position).astype(int), n_steps - 1)
    fraction = position - lower
    needed = np.unique(np.concatenate([lower, lower + 1]))
    slots: Dict[int, int] = {int(k): j for j, k in enumerate(needed)}
    stored = np.empty((needed.size,) + state.shape)
    blown = np.zeros(state.shape[0], dtype=bool)
    scale = diffusion * np.sqrt(step)

    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(n_steps + 1):
            if k in slots:
                stored[slots[k]] = state
            if k == n_steps:
                break
            increment = drift(state) * step + scale * rng.standard_normal(state.shape)
            state = np.where(blown[:, None], state, state + increment)
            blown |= ~np.all(np.isfinite(state) & (np.abs(state) <= BLOW_UP), axis=1)

    low = stored[np.searchsorted(needed, lower)]
    high = stored[np.searchsorted(needed, lower + 1)]
    values = (1.0 - fraction)[:, None, None] * low + fraction[:, None, None] * high
    return values, blown


def _van_der_pol_observations(theta, union, rng, step, diffusion):
    initial = np.tile(DGP2_INITIAL, (theta.size, 1))
    values, blown = euler_maruyama(van_der_pol_drift(theta), initial, diffusion, union, step, rng)
    return values[:, :, 0], blown


def gen_dgp2(n_subjects: int = DGP2_SUBJECTS, seed=0, n_holdout: int = 0,
             step: float = DGP2_STEP, diffusion: float = DGP2_DIFFUSION) -> LongitudinalDataset:
    """
    Stochastic Van der Pol trajectories: log θ_i ~ U(1, 5), paths integrated
    from t=0 and observed without noise at n_i ~ U{15..25} times in [10, 20].
    Subjects whose path blows up are redrawn.
    """
    if n_subjects < 1 or n_holdout < 0:
        raise ContractViolation("dgp2 needs at least one subject and a non-negative holdout count")
    rng = np.random.default_rng(seed)
    counts = rng.integers(DGP2_POINTS[0], DGP2_POINTS[1] + 1, size=n_subjects)
    times = [_distinct_uniform(rng, *DGP2_WINDOW, count + n_holdout) for count in counts]
    theta = np.exp(rng.uniform(*DGP2_LOG_THETA, size=n_subjects))
    union = np.unique(np.concatenate(times))

    observed, blown = _van_der_pol_observations(theta, union, rng, step, diffusion)
    for attempt in range(MAX_RESAMPLES):
        if not blown.any():
            break
        redo = np.flatnonzero(blown)
        logger.warning(f"dgp2: {redo.size} paths blew up, resampling (attempt {attempt + 1})")
        theta[redo] = np.exp(rng.uniform(*DGP2_LOG_THETA, size=redo.size))
        fresh, still = _van_der_pol_observations(theta[redo], union, rng, step, diffusion)
        observed[:, redo] = fresh
        blown[redo] = still
    if blown.any():
        raise NumericalFailure(f"dgp2 paths kept blowing up after {MAX_RESAMPLES} resamples",
                               label='dgp2')

    records = []
    for i, subject_times in enumerate(times):
        values = observed[np.searchsorted(union, subject_times), i]
        held = np.zeros(subject_times.size, dtype=bool)
        held[rng.choice(subject_times.size, size=n_holdout, replace=False)] = True
        records.append(SubjectRecord(
            id=subject_id(i),
            times=subject_times[~held],
            values=values[~held],
            holdout_times=subject_times[held],
            holdout_values=values[held],
        ))
    logger.info(f"Generated dgp2 with {n_subjects} subjects (seed {seed})")
    return _dataset(records, 'dgp2', seed, n_subjects=n_subjects, n_holdout=n_holdout,
                    step=step, diffusion=diffusion)


def dgp3_signal(amplitudes, frequencies, times) -> np.ndarray:
    phase = np.pi * (np.asarray(times, dtype=float) - 1.0) / (DGP3_POINTS - 1)
    return (amplitudes[0] * np.cos(frequencies[0] * phase)
            + amplitudes[1] * np.sin(frequencies[1] * phase))


def gen_dgp3(n_rows: int = DGP3_ROWS, seed=0) -> LongitudinalDataset:
    """
    Rows on t = 1..40 with independently drawn amplitudes and frequencies;
    15 to 20 random points per row are held out.
    """
    if n_rows < 1:
        raise ContractViolation("dgp3 needs at least one row")
    rng = np.random.default_rng(seed)
    grid = np.arange(1, DGP3_POINTS + 1, dtype=float)
    records = []
    for i in range(n_rows):
        amplitudes = rng.choice(DGP3_AMPLITUDES, size=2)
        frequencies = (int(rng.choice(DGP3_COS_FREQ)), int(rng.choice(DGP3_SIN_FREQ)))
        values = dgp3_signal(amplitudes, frequencies, grid) + rng.normal(scale=DGP3_NOISE_SD, size=grid.size)
        removed = rng.integers(DGP3_REMOVED[0], DGP3_REMOVED[1] + 1)
        held = np.zeros(grid.size, dtype=bool)
        held[rng.choice(grid.size, size=removed, replace=False)] = True
        records.append(SubjectRecord(
            id=subject_id(i),
            times=grid[~held],
            values=values[~held],
            holdout_times=grid[held],
            holdout_values=values[held],
            label=(float(amplitudes[0]), float(amplitudes[1]), frequencies[0], frequencies[1]),
        ))
    logger.info(f"Generated dgp3 with {n_rows} rows (seed {seed})")
    return _dataset(records, 'dgp3', seed, n_rows=n_rows)


GENERATORS = {
    'dgp1': gen_dgp1,
    'dgp2': gen_dgp2,
    'dgp3': gen_dgp3,
}


def generate(name: str, seed, **options) -> LongitudinalDataset:
    try:
        generator = GENERATORS[name]
    except KeyError:
        raise DmlmmError(f"unknown generator {name!r}", code=ErrorCode.UNKNOWN_GENERATOR,
                         choices=sorted(GENERATORS))
    return generator(seed=seed, **options)
