import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from services.grid import EventLog, GridSpec, SnapshotSeries, latlon_to_meters, meters_to_cells
from utils.exceptions import InputError, RecordError
from utils.file_handler import atomic_write_bytes, frame_to_csv, read_input_bytes

logger = logging.getLogger(__name__)

RECORD_FIELDS = (
    "pickup_time", "pickup_lat", "pickup_lon",
    "dropoff_lat", "dropoff_lon", "dropoff_time",
)
TIME_FIELDS = ("pickup_time", "dropoff_time")
LAT_FIELDS = ("pickup_lat", "dropoff_lat")
LON_FIELDS = ("pickup_lon", "dropoff_lon")
SUPPORTED_FORMATS = ("csv", "jsonl")

# Late-night hours dropped from analysis (local time)
DEFAULT_EXCLUDED_HOURS = frozenset(range(7))

SECONDS_PER_DAY = 86_400
SECONDS_PER_HOUR = 3_600

_PARSER_LINE = re.compile(r"line (\d+)")


@dataclass(frozen=True)
class RequestRecord:
    """One ride request: pickup and drop-off time and place."""

    pickup_time: int
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float
    dropoff_lon: float
    dropoff_time: int

    def __post_init__(self):
        coords = (self.pickup_lat, self.pickup_lon, self.dropoff_lat, self.dropoff_lon)
        if not all(math.isfinite(v) for v in coords):
            raise InputError("request coordinates must be finite")
        if self.dropoff_time < self.pickup_time:
            raise InputError("dropoff_time precedes pickup_time")


@dataclass
class BucketReport:
    """Counts surfaced by bucket_snapshots.

    Every parsed event (one pickup and one drop-off per record) is either
    retained or lands in exactly one skip counter.
    """

    records: int = 0
    events_parsed: int = 0
    retained_pickups: int = 0
    retained_dropoffs: int = 0
    skipped_excluded_hour: int = 0
    skipped_out_of_bounds: int = 0
    skipped_out_of_window: int = 0
    total_slots: int = 0
    retained_slots: int = 0

    @property
    def retained(self) -> int:
        return self.retained_pickups + self.retained_dropoffs

    @property
    def skipped(self) -> int:
        return self.skipped_excluded_hour + self.skipped_out_of_bounds + self.skipped_out_of_window

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


def _read_bytes(stream: Union[bytes, str, BinaryIO]) -> bytes:
    if isinstance(stream, bytes):
        return stream
    if isinstance(stream, str):
        return stream.encode("utf-8")
    return stream.read()


def _csv_frame(data: bytes) -> pd.DataFrame:
    try:
        frame = pd.read_csv(io.BytesIO(data), dtype=str, keep_default_na=False,
                            skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(RECORD_FIELDS))
    except pd.errors.ParserError as e:
        # pandas counts the header as line 1
        match = _PARSER_LINE.search(str(e))
        row = int(match.group(1)) - 1 if match else 0
        raise RecordError(row, "wrong number of fields")
    frame.columns = [str(c).strip() for c in frame.columns]
    frame.index = np.arange(1, len(frame) + 1)
    return frame


def _jsonl_frame(data: bytes) -> pd.DataFrame:
    rows: List[dict] = []
    numbers: List[int] = []
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            item = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordError(lineno, f"invalid JSON ({e.msg})")
        if not isinstance(item, dict):
            raise RecordError(lineno, "record is not an object")
        rows.append(item)
        numbers.append(lineno)
    frame = pd.DataFrame(rows, columns=list(RECORD_FIELDS) if not rows else None)
    frame.index = np.asarray(numbers, dtype=np.int64)
    return frame


def _first_bad(mask: pd.Series) -> Optional[int]:
    bad = mask[mask]
    return int(bad.index[0]) if len(bad) else None


def _validate_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Type-convert and validate a raw frame; index holds source row numbers."""
    missing = [name for name in RECORD_FIELDS if name not in frame.columns]
    if missing:
        raise RecordError(0, f"missing fields: {', '.join(missing)}")

    failures = []  # (row, reason)
    clean = pd.DataFrame(index=frame.index)
    for name in RECORD_FIELDS:
        raw = frame[name]
        if raw.dtype == object:
            raw = raw.astype(str).str.strip()
        values = pd.to_numeric(raw, errors="coerce").astype(np.float64)
        row = _first_bad(~np.isfinite(values))
        if row is not None:
            failures.append((row, f"{name} is not a finite number"))
        clean[name] = values

    for name in TIME_FIELDS:
        values = clean[name]
        row = _first_bad(np.isfinite(values) & (values != np.floor(values)))
        if row is not None:
            failures.append((row, f"{name} must be integer epoch seconds"))
    for name in LAT_FIELDS:
        row = _first_bad(clean[name].abs() > 90)
        if row is not None:
            failures.append((row, f"{name} outside [-90, 90]"))
    for name in LON_FIELDS:
        row = _first_bad(clean[name].abs() > 180)
        if row is not None:
            failures.append((row, f"{name} outside [-180, 180]"))
    row = _first_bad(clean["dropoff_time"] < clean["pickup_time"])
    if row is not None:
        failures.append((row, "dropoff_time precedes pickup_time"))

    if failures:
        row, reason = min(failures, key=lambda item: item[0])
        raise RecordError(row, reason)

    for name in TIME_FIELDS:
        clean[name] = clean[name].astype(np.int64)
    return clean.reset_index(drop=True)


def parse_frame(stream: Union[bytes, str, BinaryIO], fmt: str = "csv") -> pd.DataFrame:
    """Parse and validate ride requests into a typed frame in file order."""
    if fmt not in SUPPORTED_FORMATS:
        raise InputError(f"unsupported format {fmt!r}; expected one of {SUPPORTED_FORMATS}")
    data = _read_bytes(stream)
    if not data.strip():
        return _validate_frame(pd.DataFrame(columns=list(RECORD_FIELDS)))
    frame = _csv_frame(data) if fmt == "csv" else _jsonl_frame(data)
    clean = _validate_frame(frame)
    logger.debug(f"Parsed {len(clean)} {fmt} records")
    return clean


def frame_to_records(frame: pd.DataFrame) -> List[RequestRecord]:
    """Typed frame to RequestRecord list."""
    columns = [frame[name].tolist() for name in RECORD_FIELDS]
    return [RequestRecord(int(pt), float(plat), float(plon), float(dlat), float(dlon), int(dt))
            for pt, plat, plon, dlat, dlon, dt in zip(*columns)]


def records_to_frame(records: Iterable[RequestRecord]) -> pd.DataFrame:
    """RequestRecord list to a typed frame."""
    records = list(records)
    frame = pd.DataFrame(
        {name: [getattr(r, name) for r in records] for name in RECORD_FIELDS},
        columns=list(RECORD_FIELDS),
    )
    for name in TIME_FIELDS:
        frame[name] = frame[name].astype(np.int64)
    for name in LAT_FIELDS + LON_FIELDS:
        frame[name] = frame[name].astype(np.float64)
    return frame


def parse_records(stream: Union[bytes, str, BinaryIO], fmt: str = "csv") -> List[RequestRecord]:
    """Parse a CSV or JSON-lines byte stream into validated records."""
    return frame_to_records(parse_frame(stream, fmt))


def format_for_path(path: Union[str, Path]) -> str:
    """Infer the input format tag from a file extension."""
    suffix = Path(path).suffix.lower()
    return "jsonl" if suffix in (".jsonl", ".ndjson", ".json") else "csv"


def load_frame(path: Union[str, Path], fmt: Optional[str] = None) -> pd.DataFrame:
    """Read and parse a request file."""
    return parse_frame(read_input_bytes(str(path)), fmt or format_for_path(path))


def records_csv_bytes(records: Union[Sequence[RequestRecord], pd.DataFrame]) -> bytes:
    """CSV rendering of requests, the format parse_records reads."""
    frame = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
    return frame_to_csv(frame[list(RECORD_FIELDS)], float_format="%.7f")


def write_records(records: Union[Sequence[RequestRecord], pd.DataFrame], path: Union[str, Path]) -> Path:
    """Write requests as CSV (header always present)."""
    atomic_write_bytes(Path(path), records_csv_bytes(records))
    return Path(path)


def _hour_of_day(seconds: np.ndarray) -> np.ndarray:
    return (np.mod(seconds, SECONDS_PER_DAY) // SECONDS_PER_HOUR).astype(np.int64)


def bucket_snapshots(records: Union[Sequence[RequestRecord], pd.DataFrame], grid: GridSpec,
                     tau: float = 180.0,
                     excluded_hours: Iterable[int] = DEFAULT_EXCLUDED_HOURS,
                     start_time: Optional[int] = None,
                     end_time: Optional[int] = None) -> SnapshotSeries:
    """Bucket pickups and drop-offs into τ-long snapshots on the grid.

    Slot of an event is floor((time - start_time) / τ). Slots that start in
    an excluded hour yield no snapshot; events falling in them, events outside
    the grid and events outside [start_time, end_time) are counted in
    ``series.diagnostics`` instead. ``start_time`` defaults to midnight of the
    first event's day so slots align with hours.
    """
    if not tau > 0:
        raise InputError(f"tau must be positive, got {tau}")
    excluded = frozenset(int(h) for h in excluded_hours)
    if any(not 0 <= h < 24 for h in excluded):
        raise InputError(f"excluded hours must be in 0..23, got {sorted(excluded)}")

    table = records if isinstance(records, pd.DataFrame) else records_to_frame(records)
    n = len(table)
    report = BucketReport(records=n, events_parsed=2 * n)

    times = np.concatenate([table["pickup_time"].to_numpy(np.int64),
                            table["dropoff_time"].to_numpy(np.int64)])
    kind = np.concatenate([np.full(n, EventLog.PICKUP, dtype=np.int8),
                           np.full(n, EventLog.DROPOFF, dtype=np.int8)])
    px, py = latlon_to_meters(table["pickup_lat"].to_numpy(), table["pickup_lon"].to_numpy(), grid)
    dx, dy = latlon_to_meters(table["dropoff_lat"].to_numpy(), table["dropoff_lon"].to_numpy(), grid)
    x = np.concatenate([px, dx])
    y = np.concatenate([py, dy])

    if start_time is None:
        start_time = int(times.min() // SECONDS_PER_DAY * SECONDS_PER_DAY) if n else 0
    slot = np.floor((times - start_time) / tau).astype(np.int64)

    if end_time is not None:
        total_slots = max(int(math.ceil((end_time - start_time) / tau)), 0)
    else:
        total_slots = int(slot.max()) + 1 if n and slot.max() >= 0 else 0
    in_window = (slot >= 0) & (slot < total_slots)

    # Retained slots are those whose start hour is not excluded
    all_slots = np.arange(total_slots, dtype=np.int64)
    slot_hours = _hour_of_day(start_time + all_slots * tau)
    kept_slots = all_slots[~np.isin(slot_hours, list(excluded))]

    event_hour = _hour_of_day(times)
    slot_start_hour = _hour_of_day(start_time + slot * tau)
    in_excluded = np.isin(event_hour, list(excluded)) | np.isin(slot_start_hour, list(excluded))
    rows, cols, inside = meters_to_cells(x, y, grid)

    skip_window = ~in_window
    skip_excluded = in_window & in_excluded
    skip_bounds = in_window & ~in_excluded & ~inside
    keep = in_window & ~in_excluded & inside

    report.skipped_out_of_window = int(skip_window.sum())
    report.skipped_excluded_hour = int(skip_excluded.sum())
    report.skipped_out_of_bounds = int(skip_bounds.sum())
    report.retained_pickups = int((keep & (kind == EventLog.PICKUP)).sum())
    report.retained_dropoffs = int((keep & (kind == EventLog.DROPOFF)).sum())
    report.total_slots = total_slots
    report.retained_slots = len(kept_slots)

    k = len(kept_slots)
    index = np.searchsorted(kept_slots, slot[keep])
    cells = rows[keep] * grid.cols + cols[keep]
    flat = index * (grid.rows * grid.cols) + cells
    size = k * grid.rows * grid.cols
    is_pickup = kind[keep] == EventLog.PICKUP
    shape = (k,) + grid.shape
    pickups = np.bincount(flat[is_pickup], minlength=size).reshape(shape)
    dropoffs = np.bincount(flat[~is_pickup], minlength=size).reshape(shape)

    order = np.lexsort((kind[keep], times[keep], index))
    events = EventLog(
        snapshot=index[order],
        times=times[keep][order].astype(np.float64),
        cells=cells[order],
        kind=kind[keep][order],
        x=x[keep][order],
        y=y[keep][order],
    )

    logger.info(
        f"Bucketed {n} records into {k} snapshots "
        f"({report.retained} events kept, {report.skipped} skipped)",
        extra={'n_records': n, 'snapshots': k},
    )
    return SnapshotSeries(grid=grid, tau=float(tau), start_time=int(start_time),
                          dropoffs=dropoffs, pickups=pickups, slots=kept_slots,
                          excluded_hours=excluded, events=events, diagnostics=report)
