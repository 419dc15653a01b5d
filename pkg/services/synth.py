"""Synthetic point-sets with known fractal dimension and Poisson ride streams."""

import logging
import math
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.grid import GridSpec, meters_to_latlon
from services.ingestion import RECORD_FIELDS, RequestRecord, frame_to_records
from utils.exceptions import InputError

logger = logging.getLogger(__name__)

BURN_IN_STEPS = 32
# Written coordinates keep 7 decimals of a degree (about 1 cm); in-grid points
# stay this far from the grid edge so the CSV round trip cannot push them out
EDGE_MARGIN_M = 0.05


class AttractorKind(str, Enum):
    """Supported point-set generators."""
    SIERPINSKI_TRIANGLE = "sierpinski_triangle"
    SIERPINSKI_CARPET = "sierpinski_carpet"
    UNIFORM_SQUARE = "uniform_square"
    LINE_SEGMENT = "line_segment"


THEORETICAL_D2 = {
    AttractorKind.SIERPINSKI_TRIANGLE: math.log(3) / math.log(2),
    AttractorKind.SIERPINSKI_CARPET: math.log(8) / math.log(3),
    AttractorKind.UNIFORM_SQUARE: 2.0,
    AttractorKind.LINE_SEGMENT: 1.0,
}

# Contraction ratio and unit-square translations of each chaos-game map
_TRIANGLE_MAPS = (0.5, np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]))
_CARPET_MAPS = (1.0 / 3.0, np.array([[i / 3.0, j / 3.0] for i in range(3) for j in range(3)
                                     if (i, j) != (1, 1)]))


class AttractorSpec(BaseModel):
    """Point-set law with its diameter and known correlation dimension."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttractorKind = AttractorKind.SIERPINSKI_TRIANGLE
    scale: float = Field(1.0, gt=0, description="diameter in meters")
    theoretical_d2: Optional[float] = None

    @model_validator(mode="before")
    @classmethod
    def _default_dimension(cls, data):
        if isinstance(data, dict) and data.get("theoretical_d2") is None:
            kind = AttractorKind(data.get("kind", AttractorKind.SIERPINSKI_TRIANGLE))
            data = {**data, "theoretical_d2": THEORETICAL_D2[kind]}
        return data

    @model_validator(mode="after")
    def _check_dimension(self):
        expected = THEORETICAL_D2[self.kind]
        if not math.isclose(self.theoretical_d2, expected, rel_tol=1e-9):
            raise ValueError(f"theoretical_d2 for {self.kind.value} is {expected:.6f}, "
                             f"got {self.theoretical_d2}")
        return self


class TripLaw(BaseModel):
    """Where and when a trip ends relative to its pickup."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: str = Field("attractor", description="attractor | uniform_box | none")
    max_displacement_m: float = Field(1000.0, ge=0)
    min_duration_s: int = Field(60, ge=0)
    mean_extra_duration_s: float = Field(540.0, ge=0)
    exit_probability: float = Field(0.0, ge=0, le=1,
                                    description="chance the trip ends outside the grid")

    @field_validator("kind")
    @classmethod
    def _check_kind(cls, v):
        if v not in ("attractor", "uniform_box", "none"):
            raise ValueError(f"unknown trip law {v!r}")
        return v


class StreamSpec(BaseModel):
    """Synthetic ride-request stream on a grid.

    Either ``rate_map`` (per-cell rates, pickups uniform inside each cell) or
    ``global_rate`` (one Poisson process, locations from the attractor) drives
    pickups; ``n_requests`` instead fixes the pickup count exactly.
    """

    model_config = ConfigDict(extra="forbid")

    grid: GridSpec = Field(default_factory=GridSpec)
    attractor: AttractorSpec = Field(default_factory=lambda: AttractorSpec(scale=6400.0))
    rate_map: Optional[List[List[float]]] = None
    global_rate: Optional[float] = Field(None, ge=0)
    n_requests: Optional[int] = Field(None, ge=0)
    duration: float = Field(7 * 86_400.0, gt=0)
    start_time: int = 0
    trip_law: TripLaw = Field(default_factory=TripLaw)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_rates(self):
        drivers = [self.rate_map is not None, self.global_rate is not None, self.n_requests is not None]
        if sum(drivers) != 1:
            raise ValueError("exactly one of rate_map, global_rate, n_requests must be set")
        if self.rate_map is not None:
            rates = np.asarray(self.rate_map, dtype=np.float64)
            if rates.shape != self.grid.shape:
                raise ValueError(f"rate_map must be {self.grid.shape}, got {rates.shape}")
            if not np.isfinite(rates).all() or (rates < 0).any():
                raise ValueError("rates must be finite and non-negative")
        if self.attractor.scale > min(self.grid.height_m, self.grid.width_m):
            raise ValueError("attractor does not fit inside the grid")
        return self

    @property
    def attractor_offset(self) -> Tuple[float, float]:
        """(east, north) of the attractor's unit-square corner; attractor is centred."""
        return ((self.grid.width_m - self.attractor.scale) / 2.0,
                (self.grid.height_m - self.attractor.scale) / 2.0)


def _chaos_game(rng: np.random.Generator, n: int, ratio: float, shifts: np.ndarray,
                burn_in: int) -> np.ndarray:
    # Parallel chains: each output point is the state after burn_in + 1 random map steps
    pts = rng.random((n, 2))
    for _ in range(burn_in + 1):
        choice = rng.integers(0, len(shifts), size=n)
        pts = pts * ratio + shifts[choice]
    return pts


def gen_points(spec: AttractorSpec, n: int, seed: int, burn_in: int = BURN_IN_STEPS) -> np.ndarray:
    """n planar points on the attractor, deterministic for (spec, n, seed).

    Points lie in the [0, scale]² square anchored at the origin.
    """
    if n < 0:
        raise InputError(f"n must be non-negative, got {n}")
    if n == 0:
        return np.empty((0, 2), dtype=np.float64)
    rng = np.random.default_rng(seed)
    if spec.kind == AttractorKind.SIERPINSKI_TRIANGLE:
        unit = _chaos_game(rng, n, *_TRIANGLE_MAPS, burn_in)
    elif spec.kind == AttractorKind.SIERPINSKI_CARPET:
        unit = _chaos_game(rng, n, *_CARPET_MAPS, burn_in)
    elif spec.kind == AttractorKind.UNIFORM_SQUARE:
        unit = rng.random((n, 2))
    else:
        # Diagonal of the unit square scaled so the segment's diameter is 1
        t = rng.random(n) / math.sqrt(2.0)
        unit = np.column_stack([t, t])
    return unit * spec.scale


def _poisson_times(rng: np.random.Generator, rate: float, duration: float) -> np.ndarray:
    """Arrival times of a homogeneous Poisson process via exponential gaps."""
    if rate <= 0:
        return np.empty(0)
    expected = rate * duration
    block = int(expected + 6 * math.sqrt(expected) + 16)
    gaps = rng.exponential(1.0 / rate, size=block)
    times = np.cumsum(gaps)
    while times[-1] < duration:
        more = np.cumsum(rng.exponential(1.0 / rate, size=block)) + times[-1]
        times = np.concatenate([times, more])
    return times[times < duration]


def _pickups_from_rate_map(spec: StreamSpec, seed_seq: np.random.SeedSequence):
    rates = np.asarray(spec.rate_map, dtype=np.float64)
    grid = spec.grid
    n_cells = rates.size
    children = seed_seq.spawn(n_cells)
    times, xs, ys = [], [], []
    # One independent substream per cell, in row-major order
    for flat, child in enumerate(children):
        rate = rates.flat[flat]
        if rate <= 0:
            continue
        rng = np.random.default_rng(child)
        t = _poisson_times(rng, rate, spec.duration)
        i, j = divmod(flat, grid.cols)
        offsets = rng.random((len(t), 2))
        times.append(t)
        xs.append((j + offsets[:, 0]) * grid.epsilon)
        ys.append((i + offsets[:, 1]) * grid.epsilon)
    if not times:
        return np.empty(0), np.empty(0), np.empty(0)
    return np.concatenate(times), np.concatenate(xs), np.concatenate(ys)


def _pickups_from_attractor(spec: StreamSpec, seed_seq: np.random.SeedSequence):
    time_seq, point_seq = seed_seq.spawn(2)
    rng = np.random.default_rng(time_seq)
    if spec.n_requests is not None:
        # Conditioned on the count, Poisson arrival times are sorted uniforms
        t = np.sort(rng.random(spec.n_requests) * spec.duration)
    else:
        t = _poisson_times(rng, spec.global_rate, spec.duration)
    pts = gen_points(spec.attractor, len(t), int(point_seq.generate_state(1)[0]))
    east0, north0 = spec.attractor_offset
    return t, pts[:, 0] + east0, pts[:, 1] + north0


def _keep_inside(grid: GridSpec, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clamp planar points to the grid, EDGE_MARGIN_M clear of its edges."""
    margin = min(EDGE_MARGIN_M, 0.25 * grid.epsilon)
    return (np.clip(x, margin, grid.width_m - margin),
            np.clip(y, margin, grid.height_m - margin))


def _dropoffs(spec: StreamSpec, rng: np.random.Generator, x: np.ndarray, y: np.ndarray,
              seed_seq: np.random.SeedSequence):
    law = spec.trip_law
    grid = spec.grid
    n = len(x)
    if law.kind == "attractor":
        pts = gen_points(spec.attractor, n, int(seed_seq.generate_state(1)[0]))
        east0, north0 = spec.attractor_offset
        dx, dy = pts[:, 0] + east0, pts[:, 1] + north0
    elif law.kind == "uniform_box":
        shift = (rng.random((n, 2)) * 2.0 - 1.0) * law.max_displacement_m
        dx, dy = x + shift[:, 0], y + shift[:, 1]
    else:
        dx, dy = x.copy(), y.copy()
    dx, dy = _keep_inside(grid, dx, dy)

    duration = law.min_duration_s + rng.exponential(law.mean_extra_duration_s, size=n) \
        if law.mean_extra_duration_s > 0 else np.full(n, float(law.min_duration_s))
    exits = rng.random(n) < law.exit_probability
    # Trips leaving the study area end one kilometre south-west of the grid
    dx = np.where(exits, -1000.0, dx)
    dy = np.where(exits, -1000.0, dy)
    return dx, dy, np.floor(duration).astype(np.int64)


def gen_ride_table(spec: StreamSpec) -> pd.DataFrame:
    """Synthetic requests as a typed frame sorted by pickup time."""
    seed = spec.seed if spec.seed is not None else 0
    root = np.random.SeedSequence(seed)
    pickup_seq, trip_seq, dropoff_seq = root.spawn(3)

    if spec.rate_map is not None:
        t, x, y = _pickups_from_rate_map(spec, pickup_seq)
    else:
        t, x, y = _pickups_from_attractor(spec, pickup_seq)

    # Deterministic merge of per-cell substreams by pickup time
    order = np.argsort(t, kind="stable")
    t, x, y = t[order], x[order], y[order]
    x, y = _keep_inside(spec.grid, x, y)

    rng = np.random.default_rng(trip_seq)
    dx, dy, trip_seconds = _dropoffs(spec, rng, x, y, dropoff_seq)

    pickup_time = spec.start_time + np.floor(t).astype(np.int64)
    plat, plon = meters_to_latlon(x, y, spec.grid)
    dlat, dlon = meters_to_latlon(dx, dy, spec.grid)
    frame = pd.DataFrame({
        "pickup_time": pickup_time,
        "pickup_lat": plat,
        "pickup_lon": plon,
        "dropoff_lat": dlat,
        "dropoff_lon": dlon,
        "dropoff_time": pickup_time + trip_seconds,
    }, columns=list(RECORD_FIELDS))
    logger.debug(f"Generated {len(frame)} synthetic requests (seed {seed})")
    return frame


def gen_ride_stream(spec: StreamSpec) -> List[RequestRecord]:
    """Synthetic requests with Poisson pickups, deterministic per seed."""
    return frame_to_records(gen_ride_table(spec))
