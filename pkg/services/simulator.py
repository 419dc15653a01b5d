import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from services.grid import (PlacementMatrix, SnapshotSeries, fulfilled_fraction,
                           neighborhood_bounds, reward)
from services.oracle import opt_oracle
from services.placement import (AlgoParams, Algorithm, HistoryState, place_ftl_ch,
                                place_pp_lh, place_urand_nh)
from utils.exceptions import ConfigError, InputError
from utils.logging_config import LoggerMixin, log_performance

logger = logging.getLogger(__name__)

REWARD_COLUMNS = ("snapshot", "n_t", "reward", "matched", "pickups", "fulfilled", "empty")


@dataclass(frozen=True)
class RewardEntry:
    """Score of the placement made at snapshot ``snapshot - 1``."""

    snapshot: int
    n_t: int
    reward: float
    matched: int
    pickups: int
    fulfilled: float
    empty: bool

    def row(self) -> tuple:
        return (self.snapshot, self.n_t, self.reward, self.matched, self.pickups,
                self.fulfilled, int(self.empty))


@dataclass
class RewardSeries:
    """Per-snapshot rewards of one algorithm run."""

    algorithm: str
    params: AlgoParams
    start_index: int
    entries: List[RewardEntry] = field(default_factory=list)

    @property
    def per_snapshot(self) -> List[tuple]:
        """(snapshot, reward, n_t) triples."""
        return [(e.snapshot, e.reward, e.n_t) for e in self.entries]

    @property
    def scored(self) -> List[RewardEntry]:
        return [e for e in self.entries if not e.empty]

    @property
    def mean_reward(self) -> float:
        """Mean reward over snapshots with at least one drop-off."""
        scored = self.scored
        if not scored:
            return 0.0
        return float(np.mean([e.reward for e in scored]))

    @property
    def std_error(self) -> float:
        scored = self.scored
        if len(scored) < 2:
            return 0.0
        values = np.array([e.reward for e in scored])
        return float(values.std(ddof=1) / math.sqrt(len(values)))

    @property
    def mean_fulfilled(self) -> float:
        """Mean share of pickups served, over snapshots with pickups."""
        served = [e.fulfilled for e in self.entries if e.pickups > 0]
        return float(np.mean(served)) if served else 0.0

    def summary(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "mean_reward": self.mean_reward,
            "std_error": self.std_error,
            "mean_fulfilled": self.mean_fulfilled,
            "n_snapshots": len(self.entries),
            "n_scored": len(self.scored),
            "start_index": self.start_index,
            "params": self.params.model_dump(mode="json"),
        }


@dataclass(frozen=True)
class SparsityReport:
    """How often drop-offs are no denser than next-snapshot pickups.

    A pair (t, cell) holds when the drop-offs of the cell's neighborhood at t
    do not exceed the pickups of that neighborhood at t + 1.
    """

    n_pairs: int
    n_sparse: int

    @property
    def fraction(self) -> float:
        return self.n_sparse / self.n_pairs if self.n_pairs else 1.0

    def as_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "fraction": self.fraction}


def _window_sums(matrix: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Sum of ``matrix`` over each rectangle of ``bounds`` (n, 4)."""
    integral = np.zeros((matrix.shape[0] + 1, matrix.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = matrix.cumsum(axis=0).cumsum(axis=1)
    r0, r1, c0, c1 = bounds.T
    return integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]


def sparsity_check(series: SnapshotSeries, epsilon_prime: float, start_index: int = 0) -> SparsityReport:
    """Count (t, drop-off cell) pairs where the sparse drop-off condition holds."""
    table = neighborhood_bounds(series.grid, epsilon_prime)
    n_pairs = n_sparse = 0
    for t in range(start_index, len(series) - 1):
        cells = np.argwhere(series.dropoffs[t] > 0)
        if not len(cells):
            continue
        bounds = table[cells[:, 0], cells[:, 1]]
        demand = _window_sums(series.dropoffs[t], bounds)
        supply = _window_sums(series.pickups[t + 1], bounds)
        n_pairs += len(cells)
        n_sparse += int((demand <= supply).sum())
    return SparsityReport(n_pairs=n_pairs, n_sparse=n_sparse)


def _rng_for(params: AlgoParams) -> np.random.Generator:
    return np.random.default_rng(params.seed if params.seed is not None else 0)


def simulate(series: SnapshotSeries, params: AlgoParams, start_index: Optional[int] = None,
             rng: Optional[np.random.Generator] = None) -> RewardSeries:
    """Run one algorithm across the series.

    The drop-offs of snapshot t are placed and scored against the pickups of
    t + 1, for t from the warm start (or ``start_index`` if later) to the
    second-to-last snapshot.
    """
    start = params.warm_start if start_index is None else max(start_index, params.warm_start)
    if len(series) < start + 2:
        raise ConfigError(f"{params.label} needs at least {start + 2} snapshots, "
                          f"series has {len(series)}", algorithm=params.label)
    grid = series.grid
    # Fail fast on a radius smaller than a cell
    neighborhood_bounds(grid, params.epsilon_prime)
    rng = rng if rng is not None else _rng_for(params)
    m = params.history

    history = HistoryState.complete(series, start) if params.algorithm == Algorithm.FTL_CH else None
    result = RewardSeries(algorithm=params.label, params=params, start_index=start)
    for t in range(start, len(series) - 1):
        dropoffs = series.dropoffs[t]
        future = series.pickups[t + 1]
        if params.algorithm == Algorithm.URAND_NH:
            placement = place_urand_nh(dropoffs, params, grid, rng)
        elif params.algorithm == Algorithm.PP_LH:
            window = HistoryState.from_window(series, t - m, t)
            placement = place_pp_lh(dropoffs, window, params, grid, rng)
        elif params.algorithm == Algorithm.FTL_CH:
            placement = place_ftl_ch(dropoffs, history, params, grid, rng)
            history.add_snapshot(series[t])
        else:
            placement = opt_oracle(dropoffs, future, params, grid)
        result.entries.append(_score(t + 1, future, placement, int(dropoffs.sum())))
    return result


def _score(snapshot: int, pickups: np.ndarray, placement: PlacementMatrix, n: int) -> RewardEntry:
    value = reward(pickups, placement, n)
    served = fulfilled_fraction(pickups, placement)
    return RewardEntry(snapshot=snapshot, n_t=n, reward=value.value, matched=value.matched,
                       pickups=int(pickups.sum()), fulfilled=served.value, empty=value.empty)


def aligned_start(params_list: Sequence[AlgoParams]) -> int:
    """Common first snapshot so every run scores the same snapshots."""
    return max((p.warm_start for p in params_list), default=0)


def simulate_many(series: SnapshotSeries, params_list: Sequence[AlgoParams],
                  start_index: Optional[int] = None, max_workers: int = 4) -> Dict[str, RewardSeries]:
    """Run several algorithms on the same series, keyed by algorithm name."""
    labels = [p.label for p in params_list]
    if len(set(labels)) != len(labels):
        raise InputError(f"duplicate algorithms in {labels}")
    start = aligned_start(params_list) if start_index is None else start_index
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        runs = list(pool.map(lambda p: simulate(series, p, start), params_list))
    return dict(zip(labels, runs))


def compare_runs(results: Dict[str, RewardSeries]) -> List[Dict[str, Any]]:
    """One row per algorithm, in the order the runs were given."""
    rows = []
    for label, run in results.items():
        summary = run.summary()
        rows.append({
            "algorithm": label,
            "mean_reward": summary["mean_reward"],
            "std_error": summary["std_error"],
            "mean_fulfilled": summary["mean_fulfilled"],
            "n_scored": summary["n_scored"],
        })
    return rows


class SimulationService(LoggerMixin):
    """Runs placement algorithms over a snapshot series with timing logs."""

    def __init__(self, max_workers: int = 4):
        self.max_workers = max_workers

    def run(self, series: SnapshotSeries, params_list: Sequence[AlgoParams]) -> Dict[str, RewardSeries]:
        started = time.perf_counter()
        start = aligned_start(params_list)
        self.logger.info(f"Simulating {[p.label for p in params_list]} over {len(series)} snapshots "
                         f"from index {start}")
        results = simulate_many(series, params_list, start, self.max_workers)
        for label, run in results.items():
            self.logger.info(f"{label}: mean reward {run.mean_reward:.4f} over {len(run.scored)} snapshots",
                             extra={'algorithm': label, 'snapshots': len(run.entries)})
        log_performance('simulate', time.perf_counter() - started,
                        {'snapshots': len(series)})
        return results
