"""Grid geometry, snapshot matrices, neighborhoods and the placement reward."""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from utils.exceptions import InputError

if TYPE_CHECKING:
    from services.ingestion import BucketReport

logger = logging.getLogger(__name__)

# Mean Earth radius (IUGG) in meters
EARTH_RADIUS_M = 6_371_008.8
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0
# Longitude scale is cos(ref_lat); the reference latitude stays off the poles
MAX_REF_LAT = 89.9

Cell = Tuple[int, int]


class GridSpec(BaseModel):
    """Geometry of the discretization: ε-sided cells on an a×b grid."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(100.0, gt=0, description="cell side in meters")
    rows: int = Field(64, ge=1)
    cols: int = Field(64, ge=1)
    origin_lat: float = Field(0.0, ge=-90, le=90, description="southwest corner latitude")
    origin_lon: float = Field(0.0, ge=-180, le=180, description="southwest corner longitude")
    ref_lat: Optional[float] = Field(None, ge=-MAX_REF_LAT, le=MAX_REF_LAT)

    @model_validator(mode="before")
    @classmethod
    def _default_ref_lat(cls, data):
        # Projection reference defaults to the origin latitude, kept off the poles
        if isinstance(data, dict) and data.get("ref_lat") is None:
            origin = data.get("origin_lat", 0.0)
            if isinstance(origin, (int, float)):
                origin = min(max(float(origin), -MAX_REF_LAT), MAX_REF_LAT)
            data = {**data, "ref_lat": origin}
        return data

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def height_m(self) -> float:
        return self.rows * self.epsilon

    @property
    def width_m(self) -> float:
        return self.cols * self.epsilon

    @property
    def meters_per_degree_lon(self) -> float:
        return METERS_PER_DEGREE * math.cos(math.radians(self.ref_lat))

    def is_valid(self, cell: Cell) -> bool:
        """Whether (i, j) indexes a cell of this grid."""
        i, j = cell
        return 0 <= i < self.rows and 0 <= j < self.cols


class Snapshot(NamedTuple):
    """One time bucket: drop-off matrix D_t and pickup matrix P_t."""

    index: int
    dropoffs: np.ndarray
    pickups: np.ndarray
    slot: int

    @property
    def total_dropoffs(self) -> int:
        return int(self.dropoffs.sum())

    @property
    def total_pickups(self) -> int:
        return int(self.pickups.sum())


@dataclass(frozen=True)
class EventLog:
    """Retained events with their exact times and planar positions.

    Arrays are parallel and sorted by (snapshot, time). ``kind`` is 0 for a
    pickup and 1 for a drop-off; ``x``/``y`` are meters east/north of the grid
    origin.
    """

    snapshot: np.ndarray
    times: np.ndarray
    cells: np.ndarray
    kind: np.ndarray
    x: np.ndarray
    y: np.ndarray

    PICKUP = 0
    DROPOFF = 1

    def __len__(self) -> int:
        return len(self.snapshot)

    def window(self, lo: int, hi: int) -> slice:
        """Slice of events whose snapshot index is in [lo, hi)."""
        start = int(np.searchsorted(self.snapshot, lo, side="left"))
        stop = int(np.searchsorted(self.snapshot, hi, side="left"))
        return slice(start, stop)


@dataclass
class SnapshotSeries:
    """Time-indexed drop-off/pickup matrices on one grid.

    ``dropoffs`` and ``pickups`` are stacked (K, rows, cols) integer arrays.
    ``slots`` holds the absolute τ-slot of each retained snapshot, so excluded
    hours leave gaps in ``slots`` while ``index`` stays contiguous.
    """

    grid: GridSpec
    tau: float
    start_time: int
    dropoffs: np.ndarray
    pickups: np.ndarray
    slots: Optional[np.ndarray] = None
    excluded_hours: FrozenSet[int] = frozenset()
    events: Optional[EventLog] = None
    diagnostics: Optional["BucketReport"] = None

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError(f"tau must be positive, got {self.tau}")
        self.dropoffs = np.asarray(self.dropoffs, dtype=np.int64)
        self.pickups = np.asarray(self.pickups, dtype=np.int64)
        expected = (len(self.dropoffs),) + self.grid.shape
        if self.dropoffs.shape != expected or self.pickups.shape != expected:
            raise InputError(
                f"snapshot matrices must be {expected}, got "
                f"{self.dropoffs.shape} and {self.pickups.shape}")
        if (self.dropoffs < 0).any() or (self.pickups < 0).any():
            raise InputError("snapshot matrices must be non-negative")
        if self.slots is None:
            self.slots = np.arange(len(self.dropoffs), dtype=np.int64)
        self.slots = np.asarray(self.slots, dtype=np.int64)
        if len(self.slots) != len(self.dropoffs) or (np.diff(self.slots) <= 0).any():
            raise InputError("snapshot slots must be strictly ascending, one per snapshot")
        self.excluded_hours = frozenset(self.excluded_hours)

    @classmethod
    def from_matrices(cls, grid: GridSpec, dropoffs: Sequence, pickups: Sequence,
                      tau: float = 180.0, start_time: int = 0) -> "SnapshotSeries":
        """Build a series from per-snapshot matrix lists."""
        return cls(grid=grid, tau=tau, start_time=start_time,
                   dropoffs=np.asarray(dropoffs), pickups=np.asarray(pickups))

    def __len__(self) -> int:
        return len(self.dropoffs)

    def __getitem__(self, t: int) -> Snapshot:
        if not 0 <= t < len(self):
            raise IndexError(t)
        return Snapshot(t, self.dropoffs[t], self.pickups[t], int(self.slots[t]))

    @property
    def snapshots(self) -> List[Snapshot]:
        return [self[t] for t in range(len(self))]

    @property
    def total_dropoffs(self) -> int:
        return int(self.dropoffs.sum())

    @property
    def total_pickups(self) -> int:
        return int(self.pickups.sum())

    def pickup_points(self, t: int) -> np.ndarray:
        """Planar (x, y) meters of the pickups in snapshot t.

        Exact event positions when the series carries an event log, else the
        centre of each pickup cell repeated by its count.
        """
        if self.events is not None:
            sl = self.events.window(t, t + 1)
            mask = self.events.kind[sl] == EventLog.PICKUP
            return np.column_stack([self.events.x[sl][mask], self.events.y[sl][mask]])
        return cell_centers(self.pickups[t], self.grid)

    def all_pickup_points(self) -> np.ndarray:
        """Pickup positions over the whole series."""
        parts = [self.pickup_points(t) for t in range(len(self))]
        if not parts:
            return np.empty((0, 2))
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class PlacementMatrix:
    """Γ_t with the move list that produced it.

    ``moves`` rows are (src_row, src_col, dst_row, dst_col), one per vehicle.
    """

    entries: np.ndarray
    moves: np.ndarray = field(default_factory=lambda: np.empty((0, 4), dtype=np.int64))

    def __post_init__(self):
        if (self.entries < 0).any():
            raise InputError("placement entries must be non-negative")

    @property
    def total(self) -> int:
        return int(self.entries.sum())

    @classmethod
    def from_moves(cls, shape: Tuple[int, int], moves: np.ndarray) -> "PlacementMatrix":
        """Accumulate Γ from a move list."""
        moves = np.asarray(moves, dtype=np.int64).reshape(-1, 4)
        entries = np.zeros(shape, dtype=np.int64)
        np.add.at(entries, (moves[:, 2], moves[:, 3]), 1)
        return cls(entries=entries, moves=moves)


@dataclass(frozen=True)
class Neighborhood:
    """η(□, center, c) clipped to the grid; cells listed row-major."""

    center: Cell
    side: int
    row_range: Tuple[int, int]
    col_range: Tuple[int, int]

    @property
    def cells(self) -> List[Cell]:
        return [(i, j) for i in range(*self.row_range) for j in range(*self.col_range)]

    @property
    def bounds(self) -> Tuple[int, int, int, int]:
        """(row_lo, row_hi, col_lo, col_hi), half-open."""
        return self.row_range + self.col_range

    def __len__(self) -> int:
        return ((self.row_range[1] - self.row_range[0])
                * (self.col_range[1] - self.col_range[0]))

    def __contains__(self, cell: Cell) -> bool:
        i, j = cell
        return (self.row_range[0] <= i < self.row_range[1]
                and self.col_range[0] <= j < self.col_range[1])


class RewardValue(NamedTuple):
    """Normalized reward Σ min(P, Γ) / n_t plus the empty flag raised when n_t = 0."""

    value: float
    matched: int
    empty: bool


def project_to_cell(lat: float, lon: float, grid: GridSpec) -> Optional[Cell]:
    """Equirectangular projection of a coordinate onto the grid.

    Returns None when the point falls outside [0, rows) × [0, cols).
    """
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InputError(f"non-finite coordinate ({lat}, {lon})")
    north = (lat - grid.origin_lat) * METERS_PER_DEGREE
    east = (lon - grid.origin_lon) * grid.meters_per_degree_lon
    i = math.floor(north / grid.epsilon)
    j = math.floor(east / grid.epsilon)
    if not grid.is_valid((i, j)):
        return None
    return (i, j)


def latlon_to_meters(lat: np.ndarray, lon: np.ndarray, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection to (east, north) meters from the grid origin."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if not (np.isfinite(lat).all() and np.isfinite(lon).all()):
        raise InputError("non-finite coordinates in input")
    north = (lat - grid.origin_lat) * METERS_PER_DEGREE
    east = (lon - grid.origin_lon) * grid.meters_per_degree_lon
    return east, north


def meters_to_latlon(east: np.ndarray, north: np.ndarray, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of latlon_to_meters."""
    lat = grid.origin_lat + np.asarray(north, dtype=np.float64) / METERS_PER_DEGREE
    lon = grid.origin_lon + np.asarray(east, dtype=np.float64) / grid.meters_per_degree_lon
    return lat, lon


def meters_to_cells(east: np.ndarray, north: np.ndarray, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row, col and in-bounds mask for planar points."""
    rows = np.floor(np.asarray(north) / grid.epsilon).astype(np.int64)
    cols = np.floor(np.asarray(east) / grid.epsilon).astype(np.int64)
    inside = (rows >= 0) & (rows < grid.rows) & (cols >= 0) & (cols < grid.cols)
    return rows, cols, inside


def cell_centers(counts: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Cell-centre coordinates repeated by count, as an (n, 2) array of (x, y)."""
    rows, cols = np.nonzero(counts)
    reps = counts[rows, cols]
    x = np.repeat((cols + 0.5) * grid.epsilon, reps)
    y = np.repeat((rows + 0.5) * grid.epsilon, reps)
    return np.column_stack([x, y]).astype(np.float64)


def neighborhood_side(epsilon_prime: float, epsilon: float) -> int:
    """c = 2ε′/ε rounded half-up to the nearest integer."""
    if epsilon_prime < epsilon:
        raise InputError(f"search radius {epsilon_prime} m is smaller than the cell side {epsilon} m")
    return int(math.floor(2.0 * epsilon_prime / epsilon + 0.5))


def neighborhood_offsets(c: int) -> range:
    """Per-axis offsets of a side-c window around its anchor cell.

    Odd c is symmetric; even c spans [-c/2 + 1, c/2].
    """
    if c < 1:
        raise InputError(f"neighborhood side must be at least 1, got {c}")
    if c % 2:
        return range(-(c // 2), c // 2 + 1)
    return range(-(c // 2) + 1, c // 2 + 1)


@lru_cache(maxsize=64)
def _bounds_table(grid: GridSpec, c: int) -> np.ndarray:
    offsets = neighborhood_offsets(c)
    lo, hi = offsets.start, offsets.stop
    i = np.arange(grid.rows)
    j = np.arange(grid.cols)
    table = np.empty((grid.rows, grid.cols, 4), dtype=np.int64)
    table[:, :, 0] = np.clip(i + lo, 0, grid.rows)[:, None]
    table[:, :, 1] = np.clip(i + hi, 0, grid.rows)[:, None]
    table[:, :, 2] = np.clip(j + lo, 0, grid.cols)[None, :]
    table[:, :, 3] = np.clip(j + hi, 0, grid.cols)[None, :]
    table.setflags(write=False)
    return table


def neighborhood_bounds(grid: GridSpec, epsilon_prime: float) -> np.ndarray:
    """Clipped (row_lo, row_hi, col_lo, col_hi) for every cell, shape (rows, cols, 4)."""
    return _bounds_table(grid, neighborhood_side(epsilon_prime, grid.epsilon))


def neighborhood(center: Cell, epsilon_prime: float, grid: GridSpec) -> Neighborhood:
    """η(□, center, 2ε′/ε) clipped to the grid."""
    center = (int(center[0]), int(center[1]))
    if not grid.is_valid(center):
        raise InputError(f"cell {center} is outside the {grid.rows}x{grid.cols} grid")
    c = neighborhood_side(epsilon_prime, grid.epsilon)
    r0, r1, c0, c1 = _bounds_table(grid, c)[center]
    return Neighborhood(center=center, side=c, row_range=(int(r0), int(r1)),
                        col_range=(int(c0), int(c1)))


def is_feasible(source: Cell, target: Cell, epsilon_prime: float, grid: GridSpec) -> bool:
    """Whether a vehicle dropped off in ``source`` may be placed in ``target``."""
    return grid.is_valid(target) and target in neighborhood(source, epsilon_prime, grid)


def _check_pair(pickups: np.ndarray, placements: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pickups = np.asarray(pickups)
    placements = np.asarray(placements)
    if pickups.shape != placements.shape:
        raise InputError(f"dimension mismatch: pickups {pickups.shape} vs placements {placements.shape}")
    if (pickups < 0).any() or (placements < 0).any():
        raise InputError("pickup and placement counts must be non-negative")
    return pickups, placements


def matched_pickups(pickups: np.ndarray, placements: np.ndarray) -> int:
    """Σ min(P, Γ) over all cells."""
    pickups, placements = _check_pair(pickups, placements)
    return int(np.minimum(pickups, placements).sum())


def reward(pickups: np.ndarray, placements, n: int) -> RewardValue:
    """R_t = Σ min(P_t, Γ_t) / n_t.

    ``placements`` may be a PlacementMatrix or a plain matrix. A snapshot
    with n = 0 yields a zero reward flagged as empty.
    """
    entries = placements.entries if isinstance(placements, PlacementMatrix) else placements
    pickups, entries = _check_pair(pickups, entries)
    if n < 0:
        raise InputError(f"n must be non-negative, got {n}")
    if int(entries.sum()) != n:
        raise InputError(f"n = {n} does not equal the {int(entries.sum())} placed vehicles")
    if n == 0:
        return RewardValue(0.0, 0, True)
    matched = matched_pickups(pickups, entries)
    return RewardValue(matched / n, matched, False)


def fulfilled_fraction(pickups: np.ndarray, placements) -> RewardValue:
    """Share of pickups met by a placed vehicle, Σ min(P, Γ) / Σ P."""
    entries = placements.entries if isinstance(placements, PlacementMatrix) else placements
    pickups, entries = _check_pair(pickups, entries)
    total = int(pickups.sum())
    if total == 0:
        return RewardValue(0.0, 0, True)
    matched = matched_pickups(pickups, entries)
    return RewardValue(matched / total, matched, False)
