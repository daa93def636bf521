"""
CSV and JSON files for datasets, simulator samples and metrics.

Numbers are written with 17 significant digits so files round-trip exactly.
"""
import json
import logging
import re
from pathlib import Path
from typing import Any, List, Optional, Tuple

import numpy as np
import pandas as pd

from dmlmm.exceptions import ContractViolation, InputError
from .dataset import LongitudinalDataset, SimulatorSample, SubjectRecord, stack_series
from .metrics import MetricsReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
DATASET_COLUMNS = ('subject_id', 't', 'y', 'holdout_flag')
LABEL_COLUMN = 'label'
# The header is line 1 of the file
FIRST_DATA_LINE = 2


def write_json(path, payload: Any):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + '\n')


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"file not found: {path}", path=str(path))
    except json.JSONDecodeError as err:
        raise InputError(f"{path}: invalid JSON at line {err.lineno}", path=str(path), line=err.lineno)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix('.json')


def _read_table(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}", path=str(path))
    except pd.errors.EmptyDataError:
        raise InputError(f"{path} is empty", path=str(path))
    except pd.errors.ParserError as err:
        match = re.search(r'line (\d+)', str(err))
        line = int(match.group(1)) if match else None
        raise InputError(f"{path}: malformed row at line {line}: {err}", path=str(path), line=line)


def _numeric(frame: pd.DataFrame, column: str, path) -> np.ndarray:
    values = pd.to_numeric(frame[column].str.strip(), errors='coerce').to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        line = int(bad[0]) + FIRST_DATA_LINE
        raise InputError(
            f"{path}: line {line}: {column} value {frame[column].iloc[bad[0]]!r} is not a finite number",
            path=str(path), line=line, column=column,
        )
    return values


def format_label(label) -> str:
    if label is None:
        return ''
    if isinstance(label, (tuple, list)):
        return '|'.join(f'{v:g}' if isinstance(v, float) else str(v) for v in label)
    return str(label)


def read_dataset(path) -> LongitudinalDataset:
    """
    Long-format CSV with columns subject_id, t, y and holdout_flag (0/1),
    plus an optional label column. Subjects are ordered by id and each
    subject's points by time.
    """
    frame = _read_table(path)
    missing = [c for c in DATASET_COLUMNS[:3] if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}", path=str(path), columns=missing)
    times = _numeric(frame, 't', path)
    values = _numeric(frame, 'y', path)
    if 'holdout_flag' in frame.columns:
        flags = _numeric(frame, 'holdout_flag', path)
        bad = np.flatnonzero((flags != 0) & (flags != 1))
        if bad.size:
            line = int(bad[0]) + FIRST_DATA_LINE
            raise InputError(f"{path}: line {line}: holdout_flag must be 0 or 1", path=str(path), line=line)
    else:
        flags = np.zeros(times.shape)
    ids = frame['subject_id'].str.strip().to_numpy()
    empty = np.flatnonzero(ids == '')
    if empty.size:
        line = int(empty[0]) + FIRST_DATA_LINE
        raise InputError(f"{path}: line {line}: empty subject_id", path=str(path), line=line)
    labels = frame[LABEL_COLUMN].to_numpy() if LABEL_COLUMN in frame.columns else None

    records = []
    for sid in sorted(set(ids)):
        rows = np.flatnonzero(ids == sid)
        rows = rows[np.argsort(times[rows], kind='stable')]
        duplicate = np.flatnonzero(np.diff(times[rows]) == 0)
        if duplicate.size:
            line = int(rows[duplicate[0] + 1]) + FIRST_DATA_LINE
            raise InputError(f"{path}: line {line}: repeated time for subject {sid}",
                             path=str(path), line=line, subject=sid)
        held = flags[rows] == 1
        label = None
        if labels is not None and labels[rows[0]] != '':
            label = labels[rows[0]]
        try:
            records.append(SubjectRecord(
                id=sid,
                times=times[rows[~held]],
                values=values[rows[~held]],
                holdout_times=times[rows[held]],
                holdout_values=values[rows[held]],
                label=label,
            ))
        except ContractViolation as err:
            raise InputError(f"{path}: {err.message}", path=str(path), subject=sid)
    logger.info(f"Read {len(records)} subjects from {path}")
    return LongitudinalDataset(tuple(records), {'source': str(path)})


def read_series(path) -> Tuple[np.ndarray, np.ndarray]:
    """A single external series: CSV with columns t and y, returned ordered by time."""
    frame = _read_table(path)
    missing = [c for c in ('t', 'y') if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing columns {missing}", path=str(path), columns=missing)
    times, values = _numeric(frame, 't', path), _numeric(frame, 'y', path)
    order = np.argsort(times, kind='stable')
    times, values = times[order], values[order]
    if np.any(np.diff(times) == 0):
        raise InputError(f"{path}: repeated time in series", path=str(path))
    return times, values


def dataset_frame(data: LongitudinalDataset) -> pd.DataFrame:
    columns = {name: [] for name in DATASET_COLUMNS}
    with_labels = data.labels is not None
    label_column: List[str] = []
    for subject in data:
        for times, values, flag in ((subject.times, subject.values, 0),
                                    (subject.holdout_times, subject.holdout_values, 1)):
            columns['subject_id'].extend([subject.id] * times.size)
            columns['t'].extend(times.tolist())
            columns['y'].extend(values.tolist())
            columns['holdout_flag'].extend([flag] * times.size)
            label_column.extend([format_label(subject.label)] * times.size)
    frame = pd.DataFrame(columns)
    if with_labels:
        frame[LABEL_COLUMN] = label_column
    return frame


def write_dataset(data: LongitudinalDataset, path, sidecar: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(data).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    if sidecar is not None:
        write_json(sidecar_path(path), sidecar)
    logger.info(f"Wrote {len(data)} subjects to {path}")
    return path


def write_samples(samples: List[SimulatorSample], path, generator: str, seed: int) -> Path:
    """Matrix CSV with columns y1..yT and a sidecar of per-row records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = stack_series(samples)
    frame = pd.DataFrame(matrix, columns=[f'y{j}' for j in range(1, matrix.shape[1] + 1)])
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    write_json(sidecar_path(path), {
        'generator': generator,
        'seed': int(seed),
        'length': int(matrix.shape[1]),
        'records': [s.record for s in samples],
    })
    return path


def read_samples(path) -> Tuple[List[SimulatorSample], Optional[dict]]:
    from .serializers import SampleSidecarSerializer

    frame = _read_table(path)
    if frame.empty:
        raise InputError(f"{path} holds no samples", path=str(path))
    matrix = np.column_stack([_numeric(frame, column, path) for column in frame.columns])
    sidecar, records = None, [{} for _ in range(matrix.shape[0])]
    if sidecar_path(path).exists():
        serializer = SampleSidecarSerializer(data=read_json(sidecar_path(path)))
        if not serializer.is_valid():
            raise InputError(f"invalid sample sidecar for {path}", errors=str(serializer.errors))
        sidecar = serializer.validated_data
        if len(sidecar['records']) != matrix.shape[0] or sidecar['length'] != matrix.shape[1]:
            raise InputError(f"sidecar of {path} does not match the sample matrix", path=str(path))
        records = sidecar['records']
    return [SimulatorSample(row, record) for row, record in zip(matrix, records)], sidecar


def write_metrics(report: MetricsReport, out_dir, stem: str = 'metrics') -> List[Path]:
    """<stem>.json, <stem>.csv (one row per replicate) and <stem>_summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f'{stem}.json', out_dir / f'{stem}.csv', out_dir / f'{stem}_summary.csv']
    write_json(paths[0], report.to_dict())
    report.table().to_csv(paths[1], index=False, float_format=FLOAT_FORMAT)
    report.summary().to_csv(paths[2], index=False, float_format=FLOAT_FORMAT)
    return paths
