"""
Result files: trace and clearance-event CSVs, the compare summary and
clearance histograms, plus strict readers for the CSV schemas.
"""
import logging
import math
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
import pandas as pd
import yaml

from models import BiasingComparison, ClearanceEvent, SimTrace
from utils.errors import DataFileError, OutputError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('t', 'x', 'y', 'theta', 'kappa', 'u', 'e_lat', 'eps_max', 'iterations', 'solve_ms', 'steering')
EVENT_COLUMNS = ('agent', 'clearance_m')
HISTOGRAM_COLUMNS = ('bin_left', 'count')
FLOAT_FORMAT = '%.10g'


def trace_frame(trace: SimTrace) -> pd.DataFrame:
    rows = [(cycle.time, cycle.state.x, cycle.state.y, cycle.state.theta, cycle.state.kappa, cycle.u, cycle.e_lat,
             cycle.max_slack, cycle.iterations, cycle.solve_ms, cycle.steering_angle) for cycle in trace.cycles]
    frame = pd.DataFrame(rows, columns=list(TRACE_COLUMNS))
    return frame.astype({'iterations': 'int64'})


def events_frame(events: Sequence[ClearanceEvent]) -> pd.DataFrame:
    return pd.DataFrame([(event.agent_id, event.clearance) for event in events], columns=list(EVENT_COLUMNS))


def _write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as exc:
        raise OutputError(f"Cannot write {path}: {exc}") from exc
    logger.debug("Wrote %d rows to %s", len(frame), path)
    return path


def write_trace(trace: SimTrace, path) -> Path:
    return _write_csv(trace_frame(trace), path)


def write_events(events: Sequence[ClearanceEvent], path) -> Path:
    return _write_csv(events_frame(events), path)


def _read_csv(path, columns, numeric) -> pd.DataFrame:
    """Read a CSV whose header must equal `columns` exactly and whose numeric columns must parse."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except OSError as exc:
        raise OutputError(f"Cannot read {path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataFileError(f"not a valid CSV file ({exc})", source=path) from exc
    if tuple(frame.columns) != tuple(columns):
        raise DataFileError(f"expected columns {', '.join(columns)}, found {', '.join(map(str, frame.columns))}",
                            source=path, line=1)
    for column in numeric:
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = np.flatnonzero(values.isna().to_numpy())
        if bad.size:
            # header is line 1
            raise DataFileError(f"column '{column}' holds a non-numeric value {frame[column].iloc[bad[0]]!r}",
                                source=path, line=int(bad[0]) + 2)
        frame[column] = values.astype(float)
    return frame


def read_trace(path) -> pd.DataFrame:
    frame = _read_csv(path, TRACE_COLUMNS, TRACE_COLUMNS)
    return frame.astype({'iterations': 'int64'})


def read_events(path) -> pd.DataFrame:
    return _read_csv(path, EVENT_COLUMNS, ('clearance_m',))


def clearance_histogram(values: Iterable[float], bin_width: float, max_m: float) -> pd.DataFrame:
    """Fixed-width bins [i w, (i + 1) w) from 0 to max_m; values outside the range are dropped."""
    if not bin_width > 0 or not max_m > 0:
        raise ValueError("bin width and maximum must be > 0")
    n_bins = int(math.ceil(round(max_m / bin_width, 9)))
    values = np.asarray(list(values), dtype=float)
    # rounding first keeps values sitting on a bin edge in the upper bin
    indices = np.floor(np.round(values / bin_width, 9)).astype(int)
    inside = (indices >= 0) & (indices < n_bins) & (values < max_m)
    if np.count_nonzero(~inside):
        logger.debug("%d clearance values outside [0, %.3f) dropped", np.count_nonzero(~inside), max_m)
    counts = np.bincount(indices[inside], minlength=n_bins)
    return pd.DataFrame({'bin_left': np.round(np.arange(n_bins) * bin_width, 9), 'count': counts},
                        columns=list(HISTOGRAM_COLUMNS))


def histogram_from_files(paths: Iterable, bin_width: float, max_m: float) -> pd.DataFrame:
    values: List[float] = []
    for path in paths:
        values.extend(read_events(path)['clearance_m'].tolist())
    return clearance_histogram(values, bin_width, max_m)


def write_histogram(frame: pd.DataFrame, path) -> Path:
    return _write_csv(frame, path)


def summary_document(comparison: BiasingComparison) -> dict:
    """Compare summary: per-agent pairs, improvement, path delta and the solve-time block."""
    def rounded(value):
        return None if value is None else round(float(value), 6)

    timing = {label: {'average': rounded(stats.average_ms), 'maximum': rounded(stats.maximum_ms)}
              for label, stats in (('biasing', comparison.timing['biased']),
                                   ('no_biasing', comparison.timing['unbiased']))}
    improvement = comparison.improvement_pct
    return {
        'scenario': comparison.biased.scenario_name,
        'biasing': comparison.biasing,
        'cycles': len(comparison.biased),
        'agents': [{'agent': pair.agent_id, 'biased_m': rounded(pair.biased), 'unbiased_m': rounded(pair.unbiased),
                    'improvement_pct': rounded(pair.improvement_pct) if pair.improvement_pct is not None else 'n/a'}
                   for pair in comparison.pairs],
        'min_clearance_m': {'biased': rounded(comparison.min_clearance_biased),
                            'unbiased': rounded(comparison.min_clearance_unbiased)},
        'improvement_pct': rounded(improvement) if improvement is not None else 'n/a',
        'path_delta_max_m': float(comparison.path_delta_max),
        'collision_free': {'biased': comparison.biased.collision_free,
                           'unbiased': comparison.unbiased.collision_free},
        'timing_ms': timing,
    }


def write_summary(comparison: BiasingComparison, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(summary_document(comparison), sort_keys=False), encoding='utf-8')
    except OSError as exc:
        raise OutputError(f"Cannot write {path}: {exc}") from exc
    return path
