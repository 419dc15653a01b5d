import math

import numpy as np
import pytest
from pydantic import ValidationError

from services.grid import GridSpec
from services.ingestion import RECORD_FIELDS, bucket_snapshots, load_frame, write_records
from services.synth import (AttractorKind, AttractorSpec, StreamSpec, THEORETICAL_D2, TripLaw,
                            gen_points, gen_ride_stream, gen_ride_table)
from utils.exceptions import InputError


def _single_cell_spec(grid, rate, duration, seed):
    return StreamSpec(grid=grid, attractor=AttractorSpec(scale=100.0), rate_map=[[rate]],
                      duration=duration, trip_law=TripLaw(kind="none"), seed=seed)


class TestGenPoints:
    def test_zero_points(self):
        pts = gen_points(AttractorSpec(), 0, seed=1)
        assert pts.shape == (0, 2)

    def test_negative_count(self):
        with pytest.raises(InputError):
            gen_points(AttractorSpec(), -1, seed=1)

    def test_deterministic_per_seed(self):
        spec = AttractorSpec(kind="sierpinski_carpet")
        assert np.array_equal(gen_points(spec, 500, seed=7), gen_points(spec, 500, seed=7))
        assert not np.array_equal(gen_points(spec, 500, seed=7), gen_points(spec, 500, seed=8))

    @pytest.mark.parametrize("kind", [k.value for k in AttractorKind])
    def test_points_inside_scaled_square(self, kind):
        pts = gen_points(AttractorSpec(kind=kind, scale=250.0), 2000, seed=3)
        assert pts.shape == (2000, 2)
        assert pts.min() >= 0.0
        assert pts.max() <= 250.0

    def test_triangle_stays_below_diagonal(self):
        pts = gen_points(AttractorSpec(kind="sierpinski_triangle"), 5000, seed=2)
        assert np.all(pts.sum(axis=1) <= 1.0 + 1e-9)

    def test_carpet_avoids_centre_hole(self):
        pts = gen_points(AttractorSpec(kind="sierpinski_carpet"), 5000, seed=2)
        inside = np.all((pts > 1 / 3 + 1e-9) & (pts < 2 / 3 - 1e-9), axis=1)
        assert not inside.any()


class TestAttractorSpec:
    def test_default_dimension(self):
        spec = AttractorSpec(kind="sierpinski_carpet")
        assert spec.theoretical_d2 == pytest.approx(math.log(8) / math.log(3))
        assert THEORETICAL_D2[AttractorKind.LINE_SEGMENT] == 1.0

    def test_mismatched_dimension(self):
        with pytest.raises(ValidationError):
            AttractorSpec(kind="uniform_square", theoretical_d2=1.5)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            AttractorSpec(kind="koch_curve")


class TestStreamSpec:
    def test_exactly_one_driver(self, grid_1x1):
        attractor = AttractorSpec(scale=100.0)
        with pytest.raises(ValidationError):
            StreamSpec(grid=grid_1x1, attractor=attractor)
        with pytest.raises(ValidationError):
            StreamSpec(grid=grid_1x1, attractor=attractor, global_rate=1.0, n_requests=10)

    def test_rate_map_shape(self, small_grid):
        with pytest.raises(ValidationError):
            StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0), rate_map=[[1.0]])

    def test_negative_rate(self, grid_1x1):
        with pytest.raises(ValidationError):
            StreamSpec(grid=grid_1x1, attractor=AttractorSpec(scale=100.0), rate_map=[[-1.0]])

    def test_attractor_must_fit(self, small_grid):
        with pytest.raises(ValidationError):
            StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=900.0), global_rate=1.0)

    def test_attractor_is_centred(self):
        grid = GridSpec(epsilon=100.0, rows=10, cols=20)
        spec = StreamSpec(grid=grid, attractor=AttractorSpec(scale=600.0), global_rate=1.0)
        assert spec.attractor_offset == (700.0, 200.0)


class TestRideStream:
    def test_zero_rates_give_empty_stream(self, small_grid):
        spec = StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0),
                          rate_map=[[0.0] * 8 for _ in range(8)], duration=3600, seed=1)
        frame = gen_ride_table(spec)
        assert len(frame) == 0
        assert list(frame.columns) == list(RECORD_FIELDS)
        assert gen_ride_stream(spec) == []

    @pytest.mark.slow
    def test_single_cell_count_is_poisson(self, grid_1x1):
        counts = [len(gen_ride_table(_single_cell_spec(grid_1x1, 0.1, 10_000, seed)))
                  for seed in range(20)]
        sigma = math.sqrt(1000)
        assert all(abs(c - 1000) <= 4 * sigma for c in counts)
        assert abs(np.mean(counts) - 1000) <= 3 * sigma / math.sqrt(20)

    def test_mean_interarrival_gap(self, grid_1x1):
        frame = gen_ride_table(_single_cell_spec(grid_1x1, 0.5, 40_000, seed=11))
        gaps = np.diff(frame["pickup_time"].to_numpy())
        # Times are floored to whole seconds, which leaves the mean gap unchanged
        assert gaps.mean() == pytest.approx(2.0, rel=0.05)

    def test_sorted_and_deterministic(self, small_grid):
        spec = StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0),
                          rate_map=[[0.01 * (i + j) for j in range(8)] for i in range(8)],
                          duration=3600, trip_law=TripLaw(kind="uniform_box"), seed=5)
        first = gen_ride_table(spec)
        assert first.equals(gen_ride_table(spec))
        assert first["pickup_time"].is_monotonic_increasing
        assert (first["dropoff_time"] >= first["pickup_time"]).all()

    def test_n_requests_is_exact(self, small_grid):
        spec = StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0),
                          n_requests=1234, duration=7200, seed=2)
        frame = gen_ride_table(spec)
        assert len(frame) == 1234
        assert frame["pickup_time"].between(0, 7199).all()

    def test_start_time_offsets_pickups(self, grid_1x1):
        spec = StreamSpec(grid=grid_1x1, attractor=AttractorSpec(scale=100.0), n_requests=50,
                          duration=600, start_time=86_400, seed=4)
        assert gen_ride_table(spec)["pickup_time"].min() >= 86_400

    def test_exits_leave_the_grid(self, small_grid):
        spec = StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0), n_requests=500,
                          duration=3600, trip_law=TripLaw(exit_probability=1.0), seed=3)
        series = bucket_snapshots(gen_ride_table(spec), small_grid, tau=180, excluded_hours=(),
                                  start_time=0, end_time=86_400)
        assert series.total_pickups == 500
        assert series.total_dropoffs == 0
        assert series.diagnostics.skipped_out_of_bounds == 500

    def test_bucketing_conserves_generated_events(self, small_grid):
        spec = StreamSpec(grid=small_grid, attractor=AttractorSpec(scale=800.0), global_rate=0.2,
                          duration=3600, seed=9)
        frame = gen_ride_table(spec)
        series = bucket_snapshots(frame, small_grid, tau=180, excluded_hours=(), start_time=0,
                                  end_time=7200)
        assert series.total_pickups == len(frame)
        report = series.diagnostics
        assert report.retained + report.skipped == 2 * len(frame)

    @pytest.mark.parametrize("origin", [(0.0, 0.0), (40.7, -74.0), (-33.9, 151.2)])
    def test_box_dropoffs_stay_on_grid(self, origin, tmp_path):
        grid = GridSpec(epsilon=100.0, rows=8, cols=8, origin_lat=origin[0], origin_lon=origin[1])
        spec = StreamSpec(grid=grid, attractor=AttractorSpec(scale=800.0),
                          rate_map=[[0.01] * 8 for _ in range(8)], duration=3600,
                          trip_law=TripLaw(kind="uniform_box", exit_probability=0.0), seed=12)
        frame = gen_ride_table(spec)
        options = dict(tau=180, excluded_hours=(), start_time=0, end_time=86_400)
        in_memory = bucket_snapshots(frame, grid, **options)
        assert in_memory.diagnostics.skipped_out_of_bounds == 0
        assert in_memory.total_dropoffs == len(frame)

        path = write_records(frame, tmp_path / "stream.csv")
        from_csv = bucket_snapshots(load_frame(path), grid, **options)
        assert from_csv.diagnostics.skipped_out_of_bounds == 0
        assert from_csv.total_pickups == in_memory.total_pickups
        assert from_csv.total_dropoffs == in_memory.total_dropoffs
