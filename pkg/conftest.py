import json

import numpy as np
import pytest

from services.grid import METERS_PER_DEGREE, GridSpec, SnapshotSeries
from services.ingestion import bucket_snapshots
from services.synth import AttractorSpec, StreamSpec, TripLaw, gen_ride_table


def cell_latlon(grid: GridSpec, row: float, col: float):
    """Lat/lon of a point given in fractional cell units (origin at the equator)."""
    north = row * grid.epsilon
    east = col * grid.epsilon
    return grid.origin_lat + north / METERS_PER_DEGREE, grid.origin_lon + east / grid.meters_per_degree_lon


def triangle_series(seed: int, rows: int = 32, rate: float = 8.0, snapshots: int = 522,
                    exit_probability: float = 0.99, tau: float = 180.0) -> SnapshotSeries:
    """Sierpinski-triangle pickups filling a square grid, sparse in-grid drop-offs."""
    grid = GridSpec(epsilon=100.0, rows=rows, cols=rows)
    spec = StreamSpec(
        grid=grid,
        attractor=AttractorSpec(kind="sierpinski_triangle", scale=rows * 100.0),
        global_rate=rate,
        duration=snapshots * tau,
        trip_law=TripLaw(kind="attractor", exit_probability=exit_probability),
        seed=seed,
    )
    table = gen_ride_table(spec)
    return bucket_snapshots(table, grid, tau=tau, excluded_hours=(), start_time=0,
                            end_time=int(snapshots * tau))


@pytest.fixture
def grid_1x1():
    return GridSpec(epsilon=100.0, rows=1, cols=1)


@pytest.fixture
def small_grid():
    return GridSpec(epsilon=100.0, rows=8, cols=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_config(tmp_path):
    """Write a JSON config file and return its path."""
    def _write(data: dict, name: str = "run.json") -> str:
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return _write
