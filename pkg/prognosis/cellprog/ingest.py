"""
Cycler CSV ingestion: header-driven parsing of the canonical schema,
time standardization, capacity reconstruction and dataset merging.
"""
import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, time as dtime, timezone
from itertools import groupby
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import CSV_COLUMNS
from .core import CellSpec, CycleRecord, Step
from .errors import ConflictingDuplicate, MissingColumn, UnparseableTimestamp

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = [c for c in CSV_COLUMNS if c != 'capacity_ah']
SECONDS_PER_DAY = 86400.0


@dataclass
class ParseReport:
    source: str
    rows_read: int = 0
    malformed: int = 0
    out_of_window: int = 0
    skipped_lines: List[int] = field(default_factory=list)
    capacity_reconstructed: bool = False

    @property
    def skipped(self) -> int:
        return self.malformed + self.out_of_window


@dataclass
class Dataset:
    """Records per cell, each list sorted by time_s"""
    cells: Dict[str, List[CycleRecord]] = field(default_factory=dict)
    provenance: List[str] = field(default_factory=list)
    duplicates_dropped: int = 0

    def records(self) -> List[CycleRecord]:
        return [r for cell_id in sorted(self.cells) for r in self.cells[cell_id]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.cells.values())


def _parse_step(label: str) -> Step:
    return Step(label.strip().upper())


def timestamps_to_seconds(values: Sequence[str]) -> List[float]:
    """Convert one cell's time column to seconds.

    Plain numbers are taken as relative seconds. ISO-8601 datetimes become
    POSIX seconds (naive values read as UTC). Bare times of day roll over by
    one day whenever they go backwards.
    """
    seconds: List[float] = []
    kinds = set()
    day_offset = 0.0
    previous_tod: Optional[float] = None

    for raw in values:
        text = raw.strip()
        try:
            seconds.append(float(text))
            kinds.add('relative')
            continue
        except ValueError:
            pass

        try:
            stamp = datetime.fromisoformat(text)
            if stamp.tzinfo is None:
                stamp = stamp.replace(tzinfo=timezone.utc)
            seconds.append(stamp.timestamp())
            kinds.add('absolute')
            continue
        except ValueError:
            pass

        try:
            tod = dtime.fromisoformat(text)
        except ValueError:
            raise UnparseableTimestamp(f"Cannot parse timestamp: {raw!r}")
        value = tod.hour * 3600.0 + tod.minute * 60.0 + tod.second + tod.microsecond / 1e6
        if previous_tod is not None and value < previous_tod:
            day_offset += SECONDS_PER_DAY
        previous_tod = value
        seconds.append(value + day_offset)
        kinds.add('time_of_day')

    if len(kinds) > 1:
        raise UnparseableTimestamp(f"Mixed time formats in one cell: {sorted(kinds)}")
    return seconds


def standardize_time(records: Sequence[CycleRecord]) -> List[CycleRecord]:
    """Shift every cell's times so its earliest sample is at 0 s"""
    origin: Dict[str, float] = {}
    for r in records:
        origin[r.cell_id] = min(origin.get(r.cell_id, math.inf), r.time_s)
    return [
        r if origin[r.cell_id] == 0.0 else replace(r, time_s=r.time_s - origin[r.cell_id])
        for r in records
    ]


def reconstruct_capacity(records: Sequence[CycleRecord]) -> List[CycleRecord]:
    """Trapezoidal integral of |current| over each step, in Ah, restarting at 0 per step"""
    rebuilt: List[CycleRecord] = []
    for (_, _, step), group in groupby(records, key=lambda r: (r.cell_id, r.cycle, r.step)):
        rows = list(group)
        if step is Step.REST:
            rebuilt.extend(replace(r, capacity_ah=0.0) for r in rows)
            continue
        t = np.array([r.time_s for r in rows])
        i = np.abs([r.current_a for r in rows])
        increments = np.diff(t) * (i[1:] + i[:-1]) / 2.0 / 3600.0
        capacity = np.concatenate([[0.0], np.cumsum(increments)])
        rebuilt.extend(replace(r, capacity_ah=float(q)) for r, q in zip(rows, capacity))
    return rebuilt


def parse_cycler_csv(path: str, spec: CellSpec) -> Tuple[List[CycleRecord], ParseReport]:
    """Parse one canonical cycler export.

    Rows that fail validation are skipped and counted in the report; a
    missing required column or an unparseable time column is fatal.
    """
    report = ParseReport(source=os.path.basename(path))
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    frame.columns = [c.strip() for c in frame.columns]

    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
    has_capacity = 'capacity_ah' in frame.columns
    v_lo, v_hi = spec.protection_window_v

    parsed = []
    for line_no, row in enumerate(frame.to_dict('records'), start=2):
        report.rows_read += 1
        try:
            cycle = int(row['cycle'])
            if cycle < 0:
                raise ValueError("negative cycle index")
            values = (
                row['cell_id'].strip(),
                cycle,
                _parse_step(row['step']),
                row['time'],
                float(row['current_a']),
                float(row['voltage_v']),
                float(row['capacity_ah']) if has_capacity else 0.0,
            )
            if not all(math.isfinite(x) for x in values[4:]) or not values[0]:
                raise ValueError("non-finite or empty field")
        except (ValueError, KeyError) as e:
            report.malformed += 1
            report.skipped_lines.append(line_no)
            logger.debug(f"{report.source}:{line_no} malformed row skipped: {str(e)}")
            continue

        if not v_lo <= values[5] <= v_hi:
            report.out_of_window += 1
            report.skipped_lines.append(line_no)
            logger.debug(f"{report.source}:{line_no} voltage {values[5]} V outside [{v_lo}, {v_hi}]")
            continue
        parsed.append(values)

    # Time formats are resolved per cell, in file order
    times: Dict[str, List[str]] = {}
    for values in parsed:
        times.setdefault(values[0], []).append(values[3])
    try:
        seconds = {cell_id: iter(timestamps_to_seconds(raw)) for cell_id, raw in times.items()}
    except UnparseableTimestamp as e:
        raise UnparseableTimestamp(f"{path}: {str(e)}") from e

    records = [
        CycleRecord(cell_id, cycle, step, next(seconds[cell_id]), current, voltage, capacity)
        for cell_id, cycle, step, _, current, voltage, capacity in parsed
    ]
    records = standardize_time(records)
    if not has_capacity:
        report.capacity_reconstructed = True
        records = reconstruct_capacity(records)

    if report.skipped:
        logger.warning(
            f"{report.source}: skipped {report.malformed} malformed and "
            f"{report.out_of_window} out-of-window rows of {report.rows_read}"
        )
    logger.info(f"Parsed {len(records)} records from {report.source}")
    return records, report


def _record_key(r: CycleRecord) -> Tuple[str, float, Step]:
    return (r.cell_id, r.time_s, r.step)


def build_dataset(records: Iterable[CycleRecord], provenance: Sequence[str] = ()) -> Dataset:
    """Group records by cell, sort by time and drop exact duplicates"""
    dataset = Dataset(provenance=list(provenance))
    seen: Dict[Tuple[str, float, Step], CycleRecord] = {}
    for r in records:
        key = _record_key(r)
        previous = seen.get(key)
        if previous is not None:
            if previous != r:
                raise ConflictingDuplicate(
                    f"Conflicting samples for cell {r.cell_id} at t={r.time_s} s ({r.step.value})"
                )
            dataset.duplicates_dropped += 1
            continue
        seen[key] = r
        dataset.cells.setdefault(r.cell_id, []).append(r)

    for cell_id in dataset.cells:
        dataset.cells[cell_id].sort(key=lambda r: r.time_s)
    if dataset.duplicates_dropped:
        logger.info(f"Dropped {dataset.duplicates_dropped} duplicate records")
    return dataset


def merge_datasets(parts: Sequence[Dataset]) -> Dataset:
    """Union of all cells; identical duplicates are dropped and counted"""
    provenance = [name for part in parts for name in part.provenance]
    merged = build_dataset((r for part in parts for r in part.records()), provenance)
    merged.duplicates_dropped += sum(part.duplicates_dropped for part in parts)
    return merged


def _format_float(x: float) -> str:
    # repr is the shortest string that round-trips
    return repr(float(x))


def export_cycler_csv(
    records: Sequence[CycleRecord],
    path: str,
    extra_columns: Optional[Mapping[str, Sequence[float]]] = None,
) -> str:
    """Write records in the canonical schema with relative-seconds time"""
    columns = {
        'cell_id': [r.cell_id for r in records],
        'cycle': [str(r.cycle) for r in records],
        'step': [r.step.value for r in records],
        'time': [_format_float(r.time_s) for r in records],
        'current_a': [_format_float(r.current_a) for r in records],
        'voltage_v': [_format_float(r.voltage_v) for r in records],
        'capacity_ah': [_format_float(r.capacity_ah) for r in records],
    }
    for name, values in (extra_columns or {}).items():
        columns[name] = [_format_float(v) for v in values]

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame(columns).to_csv(path, index=False, lineterminator='\n')
    logger.info(f"Wrote {len(records)} records to {path}")
    return path
