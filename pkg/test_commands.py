import json
import math

import pandas as pd
import pytest

from main import run


def _config(n_requests, duration, exit_probability=0.0, **extra):
    config = {
        "seed": 5,
        "grid": {"epsilon": 100.0, "rows": 16, "cols": 16},
        "ingest": {"tau": 180.0, "excluded_hours": [], "end_time": int(duration)},
        "stream": {
            "attractor": {"kind": "sierpinski_triangle", "scale": 1600.0},
            "n_requests": n_requests,
            "duration": duration,
            "trip_law": {"kind": "attractor", "exit_probability": exit_probability},
        },
        "fractal": {"ladder_floor": 100.0, "n_scales": 5, "ladder_ceiling": 1600.0,
                    "fit_range": [100.0, 1600.0]},
        "max_workers": 2,
        "logging": {"log_level": "WARNING"},
    }
    config.update(extra)
    return config


def _error_line(capsys):
    err = capsys.readouterr().err
    lines = [line for line in err.splitlines() if line.startswith("{")]
    assert lines, err
    return json.loads(lines[-1])


class TestSynth:
    def test_writes_stream_and_manifest(self, tmp_path, write_config):
        path = write_config(_config(500, 3600))
        assert run(["synth", "--config", path, "--out", str(tmp_path / "out")]) == 0
        stream = pd.read_csv(tmp_path / "out" / "stream.csv")
        assert len(stream) == 500
        manifest = json.loads((tmp_path / "out" / "synth_manifest.json").read_text())
        assert manifest["n_requests"] == 500
        assert manifest["attractor"] == "sierpinski_triangle"
        assert manifest["theoretical_d2"] == pytest.approx(math.log(3) / math.log(2))
        assert manifest["config"]["seed"] == 5

    def test_log_files(self, tmp_path, write_config):
        logs = tmp_path / "logs"
        path = write_config(_config(100, 3600, logging={"log_level": "INFO", "log_dir": str(logs),
                                                        "enable_json_logging": False}))
        assert run(["synth", "--config", path, "--out", str(tmp_path / "out")]) == 0
        assert "Wrote 100 synthetic requests" in (logs / "placement.log").read_text()
        assert not (logs / "placement.json").exists()
        assert '"operation": "synth"' in (logs / "performance.log").read_text()

    def test_seed_flag_changes_stream(self, tmp_path, write_config):
        path = write_config(_config(200, 3600))
        run(["synth", "--config", path, "--out", str(tmp_path / "a")])
        run(["synth", "--config", path, "--out", str(tmp_path / "b"), "--seed", "6"])
        first = (tmp_path / "a" / "stream.csv").read_bytes()
        assert first != (tmp_path / "b" / "stream.csv").read_bytes()

    def test_same_config_same_bytes(self, tmp_path, write_config):
        out = tmp_path / "out"
        path = write_config(_config(300, 3600))
        names = ["stream.csv", "synth_manifest.json"]
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        first = {name: (out / name).read_bytes() for name in names}
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        assert {name: (out / name).read_bytes() for name in names} == first


class TestFractal:
    def test_triangle_stream(self, tmp_path, write_config):
        out = tmp_path / "out"
        path = write_config(_config(200_000, 36_000))
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        assert run(["fractal", "--config", path, "--out", str(out)]) == 0

        curve = pd.read_csv(out / "curve.csv")
        assert list(curve.columns) == ["epsilon", "log_eps", "log_sum_p2"]
        assert curve["epsilon"].tolist() == [100, 200, 400, 800, 1600]

        series = pd.read_csv(out / "d2_series.csv")
        assert len(series) == 200
        assert (series["flag"] == "ok").all()

        summary = json.loads((out / "fractal_summary.json").read_text())
        assert summary["d2_mean"] == pytest.approx(math.log(3) / math.log(2), abs=0.1)
        assert summary["aggregate_d2"] == pytest.approx(math.log(3) / math.log(2), abs=0.1)
        assert summary["n_snapshots"] == 200
        assert summary["fit_range"] == [100.0, 1600.0]

    def test_empty_stream_fails(self, tmp_path, write_config, capsys):
        out = tmp_path / "out"
        path = write_config(_config(0, 3600))
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        assert (out / "stream.csv").read_text().count("\n") == 1
        assert run(["fractal", "--config", path, "--out", str(out)]) == 2
        payload = _error_line(capsys)
        assert payload["error"] == "input_error"
        assert payload["command"] == "fractal"

    def test_same_config_same_bytes(self, tmp_path, write_config):
        out = tmp_path / "out"
        path = write_config(_config(20_000, 3600))
        names = ["curve.csv", "d2_series.csv", "fractal_summary.json", "fractal_manifest.json"]
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        assert run(["fractal", "--config", path, "--out", str(out)]) == 0
        first = {name: (out / name).read_bytes() for name in names}
        assert run(["fractal", "--config", path, "--out", str(out)]) == 0
        assert {name: (out / name).read_bytes() for name in names} == first

    def test_single_point_pickups_are_degenerate(self, tmp_path, write_config):
        out = tmp_path / "out"
        stream = tmp_path / "point.csv"
        stream.write_text("pickup_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time\n"
                          "10,0.0005,0.0005,0.0005,0.0005,20\n"
                          "200,0.0005,0.0005,0.0005,0.0005,260\n"
                          "400,0.0005,0.0005,0.0005,0.0005,500\n")
        path = write_config(_config(10, 3600, fractal={"ladder_floor": 100.0}))
        assert run(["fractal", "--config", path, "--input", str(stream), "--out", str(out)]) == 0

        series = pd.read_csv(out / "d2_series.csv")
        assert set(series["flag"]) <= {"empty", "degenerate"}
        assert (series["flag"] == "degenerate").sum() == 3
        assert series["d2"].isna().all()

        summary = json.loads((out / "fractal_summary.json").read_text())
        assert summary["fit_range"] is None
        assert summary["n_valid"] == 0
        assert "aggregate_d2" not in summary


class TestSimulate:
    @pytest.fixture
    def stream(self, tmp_path, write_config):
        out = tmp_path / "out"
        path = write_config(_config(20_000, 18_000, exit_probability=0.8))
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        return path, out

    def test_all_algorithms(self, stream):
        path, out = stream
        assert run(["simulate", "--config", path, "--out", str(out)]) == 0
        comparison = pd.read_csv(out / "comparison.csv")
        assert comparison["algorithm"].tolist() == ["urand_nh", "pp_lh", "ftl_ch", "opt"]
        best = comparison.set_index("algorithm")["mean_reward"]
        assert (best["opt"] >= best).all()

        rewards = pd.read_csv(out / "rewards_ftl_ch.csv")
        assert list(rewards.columns) == ["snapshot", "n_t", "reward", "matched", "pickups",
                                         "fulfilled", "empty"]
        # Every run is scored from the longest warm start on
        assert rewards["snapshot"].iloc[0] == 21
        assert rewards["reward"].between(0, 1).all()

        manifest = json.loads((out / "simulate_manifest.json").read_text())
        assert manifest["n_snapshots"] == len(rewards) + 21
        assert 0.0 <= manifest["sparsity"]["fraction"] <= 1.0

    def test_algo_flags(self, stream):
        path, out = stream
        assert run(["simulate", "--config", path, "--out", str(out),
                    "--algo", "opt", "--algo", "urand_nh"]) == 0
        assert sorted(p.name for p in out.glob("summary_*.json")) == ["summary_opt.json",
                                                                       "summary_urand_nh.json"]
        summary = json.loads((out / "summary_opt.json").read_text())
        assert summary["start_index"] == 0
        assert summary["seed"] is not None

    def test_opt_joins_every_comparison(self, stream):
        path, out = stream
        assert run(["simulate", "--config", path, "--out", str(out), "--algo", "ftl_ch"]) == 0
        assert sorted(p.name for p in out.glob("summary_*.json")) == ["summary_ftl_ch.json",
                                                                       "summary_opt.json"]
        comparison = pd.read_csv(out / "comparison.csv")
        assert comparison["algorithm"].tolist() == ["ftl_ch", "opt"]
        best = comparison.set_index("algorithm")["mean_reward"]
        assert best["opt"] >= best["ftl_ch"]

    def test_runs_are_reproducible(self, stream):
        path, out = stream
        names = ["comparison.csv", "rewards_pp_lh.csv", "summary_urand_nh.json",
                 "simulate_manifest.json"]
        assert run(["simulate", "--config", path, "--out", str(out)]) == 0
        first = {name: (out / name).read_bytes() for name in names}
        assert run(["synth", "--config", path, "--out", str(out)]) == 0
        assert run(["simulate", "--config", path, "--out", str(out)]) == 0
        assert {name: (out / name).read_bytes() for name in names} == first

    def test_report_rebuilds_comparison(self, stream):
        path, out = stream
        assert run(["simulate", "--config", path, "--out", str(out)]) == 0
        original = pd.read_csv(out / "comparison.csv")
        (out / "comparison.csv").unlink()
        assert run(["report", "--out", str(out)]) == 0
        rebuilt = pd.read_csv(out / "comparison.csv").set_index("algorithm")
        for _, row in original.iterrows():
            assert rebuilt.loc[row["algorithm"], "mean_reward"] == pytest.approx(row["mean_reward"])


@pytest.mark.slow
def test_week_of_box_trips(tmp_path, write_config):
    week = 604_800
    out = tmp_path / "out"
    path = write_config(_config(
        50_000, week,
        grid={"epsilon": 100.0, "rows": 16, "cols": 16, "origin_lat": 40.7, "origin_lon": -74.0},
        stream={"attractor": {"kind": "sierpinski_triangle", "scale": 1600.0},
                "n_requests": 50_000, "duration": float(week),
                "trip_law": {"kind": "uniform_box", "exit_probability": 0.0}},
        ingest={"tau": 180.0, "excluded_hours": [], "start_time": 0, "end_time": week}))
    assert run(["synth", "--config", path, "--out", str(out)]) == 0
    assert run(["simulate", "--config", path, "--out", str(out)]) == 0

    manifest = json.loads((out / "simulate_manifest.json").read_text())
    diagnostics = manifest["diagnostics"]
    assert manifest["n_snapshots"] == 3360
    assert diagnostics["total_slots"] == 3360
    assert diagnostics["records"] == 50_000
    assert diagnostics["skipped_out_of_bounds"] == 0
    assert diagnostics["retained_pickups"] == 50_000
    accounted = sum(v for k, v in diagnostics.items() if k.startswith(("retained_", "skipped_"))
                    and k != "retained_slots")
    assert accounted == diagnostics["events_parsed"] == 2 * diagnostics["records"]

    stream = pd.read_csv(out / "stream.csv")
    assert diagnostics["retained_dropoffs"] == int((stream["dropoff_time"] < week).sum())

    rewards = pd.read_csv(out / "rewards_ftl_ch.csv")
    assert len(rewards) == 3360 - 21


class TestErrors:
    def test_unknown_config_key(self, tmp_path, write_config, capsys):
        path = write_config({"grid": {"cell_size": 100}})
        assert run(["synth", "--config", path, "--out", str(tmp_path)]) == 2
        payload = _error_line(capsys)
        assert payload["error"] == "config_error"

    def test_unknown_algorithm(self, tmp_path, capsys):
        assert run(["simulate", "--out", str(tmp_path), "--algo", "greedy"]) == 2
        assert _error_line(capsys)["error"] == "config_error"

    def test_missing_input(self, tmp_path, capsys):
        assert run(["simulate", "--out", str(tmp_path), "--input", str(tmp_path / "none.csv")]) == 3
        assert _error_line(capsys)["error"] == "io_error"

    def test_report_without_summaries(self, tmp_path, capsys):
        assert run(["report", "--out", str(tmp_path)]) == 2
        assert _error_line(capsys)["command"] == "report"

    def test_bad_record(self, tmp_path, capsys):
        stream = tmp_path / "bad.csv"
        stream.write_text("pickup_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon,dropoff_time\n"
                          "100,0.001,0.001,0.001,0.001,50\n")
        assert run(["fractal", "--out", str(tmp_path), "--input", str(stream)]) == 2
        payload = _error_line(capsys)
        assert payload["error"] == "record_error"
        assert payload["row"] == 1


class TestInitConfig:
    def test_written_config_drives_a_run(self, tmp_path):
        path = tmp_path / "run.json"
        assert run(["init-config", str(path)]) == 0
        data = json.loads(path.read_text())
        assert data["seed"] == 0
        assert len(data["algorithms"]) == 4

    def test_unwritable_path(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run(["init-config", str(blocker / "run.json")]) == 3
        assert _error_line(capsys)["error"] == "io_error"
