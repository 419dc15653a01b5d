import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from services.grid import GridSpec, PlacementMatrix, Snapshot, SnapshotSeries, neighborhood_bounds
from utils.exceptions import InputError, InsufficientDataError

logger = logging.getLogger(__name__)


class Algorithm(str, Enum):
    """Placement strategies."""
    URAND_NH = "urand_nh"
    PP_LH = "pp_lh"
    FTL_CH = "ftl_ch"
    OPT = "opt"


# History lengths used for the week-long runs
DEFAULT_HISTORY = {
    Algorithm.PP_LH: 20,
    Algorithm.FTL_CH: 3,
}

TIE_BREAKS = ("random", "lowest_index")


class AlgoParams(BaseModel):
    """Parameters of one placement run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    algorithm: Algorithm = Algorithm.URAND_NH
    epsilon_prime: float = Field(500.0, gt=0, description="search radius in meters")
    history_m: Optional[int] = Field(None, ge=1)
    min_samples_u: int = Field(3, ge=2)
    seed: Optional[int] = None
    tie_break: str = "random"

    @field_validator("tie_break")
    @classmethod
    def _check_tie_break(cls, v):
        if v not in TIE_BREAKS:
            raise ValueError(f"tie_break must be one of {TIE_BREAKS}")
        return v

    @property
    def history(self) -> int:
        """Resolved m: explicit value or the algorithm's default."""
        if self.history_m is not None:
            return self.history_m
        return DEFAULT_HISTORY.get(self.algorithm, 0)

    @property
    def warm_start(self) -> int:
        """First snapshot index t whose drop-offs get placed."""
        if self.algorithm in (Algorithm.PP_LH, Algorithm.FTL_CH):
            return self.history
        return 0

    @property
    def label(self) -> str:
        return self.algorithm.value


def mle_lambda(interarrival_times: Sequence[float]) -> float:
    """Maximum-likelihood rate of an exponential law: 1 / mean gap."""
    gaps = np.asarray(interarrival_times, dtype=np.float64)
    if gaps.size == 0:
        raise InsufficientDataError("no inter-arrival times to estimate a rate from")
    if not np.isfinite(gaps).all() or (gaps <= 0).any():
        raise InputError("inter-arrival times must be finite and positive")
    return float(1.0 / gaps.mean())


def prob_event(lam: float, t: float) -> float:
    """Pr{N(t) > 0 | λ} = 1 - exp(-λt)."""
    if lam < 0 or t < 0:
        raise InputError(f"rate and duration must be non-negative, got λ={lam}, t={t}")
    return float(-math.expm1(-lam * t))


@dataclass
class HistoryState:
    """Aggregated event history M = Σ (D_i + P_i) over snapshots [lo, hi).

    ``times``/``cells`` list the window's events sorted by (cell, time); they
    are only populated for windowed (PP-LH) histories.
    """

    counts: np.ndarray
    window: Tuple[int, int]
    tau: float
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    cells: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        if (self.counts < 0).any():
            raise InputError("history counts must be non-negative")

    @classmethod
    def complete(cls, series: SnapshotSeries, upto: int) -> "HistoryState":
        """Counts over every snapshot before ``upto``."""
        counts = (series.dropoffs[:upto].sum(axis=0) + series.pickups[:upto].sum(axis=0)).astype(np.int64)
        return cls(counts=counts, window=(0, upto), tau=series.tau)

    @classmethod
    def from_window(cls, series: SnapshotSeries, lo: int, hi: int) -> "HistoryState":
        """Counts and event times over snapshots [lo, hi)."""
        lo = max(lo, 0)
        counts = (series.dropoffs[lo:hi].sum(axis=0) + series.pickups[lo:hi].sum(axis=0)).astype(np.int64)
        if series.events is not None:
            sl = series.events.window(lo, hi)
            times = series.events.times[sl]
            cells = series.events.cells[sl]
        else:
            times, cells = _spread_event_times(series, lo, hi)
        order = np.lexsort((times, cells))
        return cls(counts=counts, window=(lo, hi), tau=series.tau,
                   times=times[order], cells=cells[order])

    def add_snapshot(self, snapshot: Snapshot):
        """Fold one more snapshot into the complete history."""
        self.counts = self.counts + snapshot.dropoffs + snapshot.pickups
        self.window = (self.window[0], self.window[1] + 1)

    def event_times(self, cell: Tuple[int, int]) -> np.ndarray:
        """Ordered event times of one cell inside the window."""
        flat = cell[0] * self.counts.shape[1] + cell[1]
        lo = np.searchsorted(self.cells, flat, side="left")
        hi = np.searchsorted(self.cells, flat, side="right")
        return self.times[lo:hi]

    def rates(self, min_samples: int) -> np.ndarray:
        """Per-cell MLE rate λ, NaN where the cell has no estimator.

        A cell gets an estimator when its windowed count exceeds
        ``min_samples`` and its events span a positive duration. (k - 1) /
        (last - first) equals 1 / mean of the k - 1 inter-arrival gaps; it is
        computed in closed form because integer timestamps may tie.
        """
        n_cells = self.counts.size
        lam = np.full(n_cells, np.nan)
        if len(self.cells) == 0:
            return lam.reshape(self.counts.shape)
        k = np.bincount(self.cells, minlength=n_cells)
        eligible = np.flatnonzero((self.counts.ravel() > min_samples) & (k >= 2))
        first = self.times[np.searchsorted(self.cells, eligible, side="left")]
        last = self.times[np.searchsorted(self.cells, eligible, side="right") - 1]
        span = last - first
        ok = span > 0
        lam[eligible[ok]] = (k[eligible[ok]] - 1) / span[ok]
        return lam.reshape(self.counts.shape)


def _spread_event_times(series: SnapshotSeries, lo: int, hi: int) -> Tuple[np.ndarray, np.ndarray]:
    """Evenly spaced stand-in event times for series built from matrices only."""
    times, cells = [], []
    for t in range(lo, hi):
        per_cell = (series.dropoffs[t] + series.pickups[t]).ravel()
        nz = np.flatnonzero(per_cell)
        reps = per_cell[nz]
        if not len(nz):
            continue
        cell_ids = np.repeat(nz, reps)
        # Position of each event within its cell, then spread over the snapshot
        rank = np.arange(len(cell_ids)) - np.repeat(np.cumsum(reps) - reps, reps)
        slot_start = series.start_time + series.slots[t] * series.tau
        times.append(slot_start + (rank + 0.5) * series.tau / np.repeat(reps, reps))
        cells.append(cell_ids)
    if not times:
        return np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(times).astype(np.float64), np.concatenate(cells).astype(np.int64)


def _check_dropoffs(dropoffs, grid: GridSpec) -> np.ndarray:
    matrix = np.asarray(dropoffs)
    if matrix.shape != grid.shape:
        raise InputError(f"drop-off matrix must be {grid.shape}, got {matrix.shape}")
    if (matrix < 0).any():
        raise InputError("drop-off counts must be non-negative")
    return matrix.astype(np.int64)


def _dropoff_units(dropoffs: np.ndarray) -> Iterator[Tuple[int, int, int]]:
    """Drop-off cells in row-major order with their multiplicity."""
    for i, j in np.argwhere(dropoffs > 0):
        yield int(i), int(j), int(dropoffs[i, j])


def _uniform_cell(rng: np.random.Generator, bounds: np.ndarray) -> Tuple[int, int]:
    r0, r1, c0, c1 = bounds
    return int(rng.integers(r0, r1)), int(rng.integers(c0, c1))


def place_urand_nh(dropoffs, params: AlgoParams, grid: GridSpec,
                   rng: np.random.Generator) -> PlacementMatrix:
    """Each vehicle goes to a uniformly random cell of its neighborhood."""
    matrix = _check_dropoffs(dropoffs, grid)
    bounds = neighborhood_bounds(grid, params.epsilon_prime)
    moves = []
    for i, j, k in _dropoff_units(matrix):
        r0, r1, c0, c1 = bounds[i, j]
        rows = rng.integers(r0, r1, size=k)
        cols = rng.integers(c0, c1, size=k)
        moves.append(np.column_stack([np.full(k, i), np.full(k, j), rows, cols]))
    return PlacementMatrix.from_moves(grid.shape, np.concatenate(moves) if moves else np.empty((0, 4)))


def place_pp_lh(dropoffs, history: HistoryState, params: AlgoParams, grid: GridSpec,
                rng: np.random.Generator) -> PlacementMatrix:
    """Poisson process with limited history.

    Each vehicle takes the neighborhood cell with the highest
    Pr{N(τ) > 0 | λ}; the chosen cell's estimator is withdrawn for the rest
    of the snapshot. Without any estimator in reach the vehicle is placed
    uniformly at random. prob_event is monotone in λ, so ranking by λ picks
    the same cell and still separates probabilities that saturate at 1.
    """
    matrix = _check_dropoffs(dropoffs, grid)
    if history.counts.shape != grid.shape:
        raise InputError(f"history must be {grid.shape}, got {history.counts.shape}")
    bounds = neighborhood_bounds(grid, params.epsilon_prime)
    lam = history.rates(params.min_samples_u)
    available = ~np.isnan(lam)
    score = np.where(available, lam, -np.inf)

    moves = []
    for i, j, k in _dropoff_units(matrix):
        r0, r1, c0, c1 = bounds[i, j]
        for _ in range(k):
            window = score[r0:r1, c0:c1]
            flat = int(np.argmax(window))
            if np.isfinite(window.flat[flat]):
                di, dj = divmod(flat, c1 - c0)
                target = (int(r0 + di), int(c0 + dj))
                score[target] = -np.inf
            else:
                target = _uniform_cell(rng, bounds[i, j])
            moves.append((i, j) + target)
    return PlacementMatrix.from_moves(grid.shape, np.asarray(moves, dtype=np.int64).reshape(-1, 4))


def place_ftl_ch(dropoffs, history: HistoryState, params: AlgoParams, grid: GridSpec,
                 rng: np.random.Generator) -> PlacementMatrix:
    """Follow the leader over the complete history M.

    The leader loses one count per vehicle it receives (floored at 0) for the
    rest of the snapshot; the caller's history is left untouched.
    """
    matrix = _check_dropoffs(dropoffs, grid)
    if history.counts.shape != grid.shape:
        raise InputError(f"history must be {grid.shape}, got {history.counts.shape}")
    bounds = neighborhood_bounds(grid, params.epsilon_prime)
    work = history.counts.astype(np.int64).copy()
    lowest_index = params.tie_break == "lowest_index"

    moves = []
    for i, j, k in _dropoff_units(matrix):
        r0, r1, c0, c1 = bounds[i, j]
        for _ in range(k):
            window = work[r0:r1, c0:c1]
            top = window.max()
            if top <= 0:
                target = _uniform_cell(rng, bounds[i, j])
            else:
                leaders = np.flatnonzero(window == top)
                if len(leaders) == 1 or lowest_index:
                    flat = int(leaders[0])
                else:
                    flat = int(leaders[rng.integers(len(leaders))])
                di, dj = divmod(flat, c1 - c0)
                target = (int(r0 + di), int(c0 + dj))
                work[target] = max(work[target] - 1, 0)
            moves.append((i, j) + target)
    return PlacementMatrix.from_moves(grid.shape, np.asarray(moves, dtype=np.int64).reshape(-1, 4))
