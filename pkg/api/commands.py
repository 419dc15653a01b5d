"""Subcommand handlers: synth, fractal, simulate, report."""

import logging
import math
import os
import time
from typing import Any, Dict, List, Optional

import pandas as pd

from config.settings import RunConfig, create_default_config_file
from services.fractal import FLAG_OK, FractalAnalysisService
from services.grid import SnapshotSeries
from services.ingestion import bucket_snapshots, load_frame, write_records
from services.placement import AlgoParams, Algorithm
from services.simulator import REWARD_COLUMNS, SimulationService, compare_runs, sparsity_check
from services.synth import gen_ride_table
from utils.exceptions import InputError, OutputError
from utils.file_handler import FileHandler
from utils.logging_config import log_performance

logger = logging.getLogger(__name__)

STREAM_FILE = "stream.csv"
COMPARISON_COLUMNS = ("algorithm", "mean_reward", "mean_fulfilled", "std_error", "n_scored")
FLOAT_FORMAT = "%.10g"


def _finite(value: Optional[float]) -> Optional[float]:
    """NaN and infinities become null in JSON outputs."""
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def _config_dump(config: RunConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def _input_path(config: RunConfig) -> str:
    """Configured input, else the stream a previous ``synth`` left in the output dir."""
    path = config.input or os.path.join(config.out_dir, STREAM_FILE)
    if not os.path.exists(path):
        raise OutputError(f"input stream not found: {path}", path=path)
    return path


def load_series(config: RunConfig) -> SnapshotSeries:
    """Read the input stream and bucket it into snapshots."""
    path = _input_path(config)
    frame = load_frame(path)
    if len(frame) == 0:
        raise InputError(f"input stream {path} holds no requests", path=path)
    ingest = config.ingest
    return bucket_snapshots(frame, config.grid, tau=ingest.tau,
                            excluded_hours=ingest.excluded_hours,
                            start_time=ingest.start_time, end_time=ingest.end_time)


def cmd_synth(config: RunConfig) -> Dict[str, Any]:
    """Write a synthetic request stream and its manifest."""
    started = time.perf_counter()
    spec = config.stream_spec()
    frame = gen_ride_table(spec)

    files = FileHandler(config.out_dir)
    write_records(frame, files.path(STREAM_FILE))
    files.write_manifest(
        "synth_manifest.json", command="synth", config=_config_dump(config), seed=spec.seed,
        outputs=[STREAM_FILE],
        extra={
            "attractor": spec.attractor.kind.value,
            "theoretical_d2": spec.attractor.theoretical_d2,
            "n_requests": len(frame),
        })

    logger.info(f"Wrote {len(frame)} synthetic requests to {files.path(STREAM_FILE)}",
                extra={'n_records': len(frame), 'seed': spec.seed})
    log_performance('synth', time.perf_counter() - started, {'n_records': len(frame)})
    return {"stream": str(files.path(STREAM_FILE)), "n_requests": len(frame)}


def cmd_fractal(config: RunConfig) -> Dict[str, Any]:
    """Correlation curve, per-snapshot D₂ series and their summary."""
    series = load_series(config)
    settings = config.fractal
    service = FractalAnalysisService(
        ladder_floor=settings.ladder_floor, n_scales=settings.n_scales,
        ladder_ceiling=settings.ladder_ceiling, ladder_kind=settings.ladder_kind,
        fit_range=settings.fit_range,
        min_r_squared=settings.min_r_squared, min_scales=settings.min_scales,
        max_workers=config.max_workers)
    report = service.analyze(series)

    files = FileHandler(config.out_dir)
    files.write_csv("curve.csv", ("epsilon", "log_eps", "log_sum_p2"), report.curve.rows(),
                    float_format=FLOAT_FORMAT)
    d2_rows = []
    for item in report.snapshots:
        if item.flag == FLAG_OK:
            d2_rows.append((item.snapshot, item.estimate.d2, item.estimate.r_squared, item.flag))
        else:
            d2_rows.append((item.snapshot, math.nan, math.nan, item.flag))
    files.write_frame("d2_series.csv",
                      pd.DataFrame(d2_rows, columns=["snapshot", "d2", "r2", "flag"]),
                      float_format=FLOAT_FORMAT)

    summary = {k: _finite(v) if isinstance(v, float) else v
               for k, v in report.summary.as_dict().items()}
    summary["fit_range"] = list(report.fit_range) if report.fit_range else None
    if report.aggregate is not None:
        summary["aggregate_d2"] = _finite(report.aggregate.d2)
        summary["aggregate_r2"] = _finite(report.aggregate.r_squared)
    summary["n_snapshots"] = len(series)
    files.write_json("fractal_summary.json", summary)
    files.write_manifest(
        "fractal_manifest.json", command="fractal", config=_config_dump(config), seed=config.seed,
        outputs=["curve.csv", "d2_series.csv", "fractal_summary.json"],
        extra={"diagnostics": series.diagnostics.as_dict() if series.diagnostics else None})
    return summary


def cmd_simulate(config: RunConfig) -> Dict[str, Any]:
    """Run every configured algorithm, plus OPT, on the input series."""
    series = load_series(config)
    params_list = config.resolved_algorithms()
    if not params_list:
        raise InputError("no algorithm configured")
    if all(p.algorithm != Algorithm.OPT for p in params_list):
        # Comparisons always include OPT
        params_list.append(AlgoParams(algorithm=Algorithm.OPT,
                                      epsilon_prime=params_list[0].epsilon_prime,
                                      seed=config.derive_seed(Algorithm.OPT.value)))
    results = SimulationService(max_workers=config.max_workers).run(series, params_list)

    files = FileHandler(config.out_dir)
    outputs: List[str] = []
    for label, run in results.items():
        rows_file = f"rewards_{label}.csv"
        files.write_csv(rows_file, REWARD_COLUMNS, (e.row() for e in run.entries),
                        float_format=FLOAT_FORMAT)
        summary = run.summary()
        summary["seed"] = run.params.seed
        files.write_json(f"summary_{label}.json", summary)
        outputs.extend([rows_file, f"summary_{label}.json"])

    comparison = compare_runs(results)
    files.write_frame("comparison.csv", pd.DataFrame(comparison, columns=list(COMPARISON_COLUMNS)),
                      float_format=FLOAT_FORMAT)
    outputs.append("comparison.csv")

    sparsity = sparsity_check(series, params_list[0].epsilon_prime)
    files.write_manifest(
        "simulate_manifest.json", command="simulate", config=_config_dump(config), seed=config.seed,
        outputs=outputs,
        extra={
            "diagnostics": series.diagnostics.as_dict() if series.diagnostics else None,
            "sparsity": sparsity.as_dict(),
            "n_snapshots": len(series),
        })
    return {"comparison": comparison}


def cmd_report(config: RunConfig) -> Dict[str, Any]:
    """Merge every summary_*.json of the output directory into comparison.csv."""
    files = FileHandler(config.out_dir)
    summaries = files.list_files("summary_*.json")
    if not summaries:
        raise InputError(f"no summary_*.json files in {config.out_dir}")
    rows = []
    for path in summaries:
        data = files.read_json(path.name)
        missing = [c for c in COMPARISON_COLUMNS if c not in data]
        if missing:
            raise InputError(f"{path.name} lacks {missing}", path=str(path))
        rows.append({c: data[c] for c in COMPARISON_COLUMNS})
    files.write_frame("comparison.csv", pd.DataFrame(rows, columns=list(COMPARISON_COLUMNS)),
                      float_format=FLOAT_FORMAT)
    return {"comparison": rows}


def cmd_init_config(path: str) -> Dict[str, Any]:
    """Write the documented default configuration."""
    try:
        create_default_config_file(path)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e.strerror or e}", path=path)
    return {"config": path}
