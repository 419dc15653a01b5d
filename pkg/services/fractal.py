import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import linregress

from services.grid import SnapshotSeries
from utils.exceptions import FitRangeError, InputError
from utils.logging_config import LoggerMixin, log_performance

logger = logging.getLogger(__name__)

# Relative slack when matching ladder entries against range endpoints
RANGE_TOLERANCE = 1e-9

FLAG_OK = "ok"
FLAG_EMPTY = "empty"
FLAG_DEGENERATE = "degenerate"

LADDER_KINDS = ("dyadic", "geometric")


@dataclass(frozen=True)
class OccupancyHistogram:
    """Per-cell point counts p_i at one grid scale; empty cells are not stored."""

    epsilon: float
    counts: Dict[Tuple[int, int], int]
    total_points: int

    @property
    def sum_squares(self) -> int:
        return sum(p * p for p in self.counts.values())


@dataclass(frozen=True)
class CorrelationCurve:
    """log Σ p_i² against log ε over an ascending ladder (natural logs)."""

    epsilons: np.ndarray
    log_eps: np.ndarray
    log_sum_p2: np.ndarray
    occupied_cells: np.ndarray

    @property
    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.log_eps.tolist(), self.log_sum_p2.tolist()))

    def __len__(self) -> int:
        return len(self.epsilons)

    def rows(self) -> List[Tuple[float, float, float]]:
        """(epsilon, log_eps, log_sum_p2) rows for CSV export."""
        return list(zip(self.epsilons.tolist(), self.log_eps.tolist(), self.log_sum_p2.tolist()))


@dataclass(frozen=True)
class D2Estimate:
    """Fitted correlation dimension over a fractal range."""

    d2: float
    r_squared: float
    range_lo: float
    range_hi: float
    n_scales: int
    intercept: float = 0.0


@dataclass(frozen=True)
class SnapshotD2:
    """D₂ of one snapshot's pickups; ``estimate`` is None unless flag is ok."""

    snapshot: int
    flag: str
    n_points: int
    estimate: Optional[D2Estimate] = None


@dataclass(frozen=True)
class D2Summary:
    """min / max / mean D₂ over unflagged snapshots."""

    d2_min: float
    d2_max: float
    d2_mean: float
    n_valid: int
    n_flagged: int

    def as_dict(self) -> Dict[str, float]:
        return {
            'd2_min': self.d2_min, 'd2_max': self.d2_max, 'd2_mean': self.d2_mean,
            'n_valid': self.n_valid, 'n_flagged': self.n_flagged,
        }


@dataclass(frozen=True)
class PowerLawFit:
    """Exponent of counts ∝ radius^k from a log-log regression."""

    exponent: float
    r_squared: float
    radii: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        pts = pts.reshape(-1, 2)
    if len(pts) == 0:
        raise InputError("point set is empty")
    if not np.isfinite(pts).all():
        raise InputError("point set contains non-finite coordinates")
    return pts


def _cell_counts(pts: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Occupied cells and their counts, cells taken from the bounding-box corner."""
    origin = pts.min(axis=0)
    # (row, col) = (floor(y/ε), floor(x/ε))
    idx = np.floor((pts[:, ::-1] - origin[::-1]) / epsilon).astype(np.int64)
    cells, counts = np.unique(idx, axis=0, return_counts=True)
    return cells, counts


def occupancy(points, epsilon: float) -> OccupancyHistogram:
    """Occupancy p_i of each grid cell of side ε over a planar point-set."""
    if not epsilon > 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    pts = _as_points(points)
    cells, counts = _cell_counts(pts, epsilon)
    histogram = {(int(i), int(j)): int(c) for (i, j), c in zip(cells, counts)}
    return OccupancyHistogram(epsilon=float(epsilon), counts=histogram, total_points=len(pts))


def _check_ladder(ladder: Sequence[float], minimum: int = 3) -> np.ndarray:
    eps = np.asarray(ladder, dtype=np.float64)
    if eps.ndim != 1 or len(eps) < minimum:
        raise InputError(f"ladder needs at least {minimum} scales, got {len(eps)}")
    if not (eps > 0).all():
        raise InputError("ladder scales must be positive")
    if not (np.diff(eps) > 0).all():
        raise InputError("ladder must be strictly ascending")
    return eps


def _curve(pts: np.ndarray, eps: np.ndarray) -> CorrelationCurve:
    sums = np.empty(len(eps))
    occupied = np.empty(len(eps), dtype=np.int64)
    for k, e in enumerate(eps):
        _, counts = _cell_counts(pts, e)
        sums[k] = float(np.sum(counts.astype(np.float64) ** 2))
        occupied[k] = len(counts)
    return CorrelationCurve(epsilons=eps, log_eps=np.log(eps), log_sum_p2=np.log(sums),
                            occupied_cells=occupied)


def correlation_sum(points, epsilon_ladder: Sequence[float]) -> CorrelationCurve:
    """Σ p_i² at every ladder scale."""
    return _curve(_as_points(points), _check_ladder(epsilon_ladder))


def geometric_ladder(floor: float, ceiling: float, n_scales: int = 12) -> List[float]:
    """n_scales log-spaced scales from floor up to ceiling (the bounding-box size)."""
    if not 0 < floor < ceiling:
        raise InputError(f"ladder needs 0 < floor < ceiling, got {floor} and {ceiling}")
    if n_scales < 3:
        raise InputError(f"ladder needs at least 3 scales, got {n_scales}")
    return np.geomspace(floor, ceiling, n_scales).tolist()


def dyadic_ladder(floor: float, n_scales: int = 12, ratio: float = 2.0) -> List[float]:
    """Ascending ladder floor, floor·ratio, ..., floor·ratio^(n-1)."""
    if not floor > 0 or n_scales < 1 or not ratio > 1:
        raise InputError("ladder needs floor > 0, n_scales >= 1 and ratio > 1")
    return [floor * ratio ** k for k in range(n_scales)]


def bounding_size(points) -> float:
    """Longest side of the point-set's bounding box."""
    pts = _as_points(points)
    return float((pts.max(axis=0) - pts.min(axis=0)).max())


def _ols(x: np.ndarray, y: np.ndarray) -> Tuple[float, float, float]:
    """Slope, intercept and r² of an unweighted least-squares line."""
    fit = linregress(x, y)
    residual = y - (fit.intercept + fit.slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(residual ** 2))
    # A perfectly flat curve is a perfect fit of slope 0
    r_squared = 1.0 if ss_tot <= 1e-24 else max(0.0, 1.0 - ss_res / ss_tot)
    return float(fit.slope), float(fit.intercept), r_squared


def _in_range(eps: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (eps >= lo * (1 - RANGE_TOLERANCE)) & (eps <= hi * (1 + RANGE_TOLERANCE))


def fit_d2(curve: CorrelationCurve, range_lo: float, range_hi: float) -> D2Estimate:
    """OLS slope of log Σp² on log ε over the ladder entries in [range_lo, range_hi]."""
    mask = _in_range(curve.epsilons, range_lo, range_hi)
    n = int(mask.sum())
    if n < 3:
        raise FitRangeError(
            f"only {n} scales inside [{range_lo}, {range_hi}]; at least 3 are needed",
            n_scales=n)
    slope, intercept, r_squared = _ols(curve.log_eps[mask], curve.log_sum_p2[mask])
    eps = curve.epsilons[mask]
    return D2Estimate(d2=slope, r_squared=r_squared, range_lo=float(eps[0]),
                      range_hi=float(eps[-1]), n_scales=n, intercept=intercept)


def detect_fractal_range(curve: CorrelationCurve, min_r_squared: float = 0.98,
                         min_scales: int = 4) -> Optional[Tuple[float, float]]:
    """Longest contiguous ladder window whose log-log fit has r² ≥ threshold.

    Ties go to the window with the wider ε span, then to the coarser one.
    """
    n = len(curve)
    if n < min_scales:
        return None
    best = None
    best_key = None
    for start in range(n):
        for stop in range(start + min_scales, n + 1):
            _, _, r_squared = _ols(curve.log_eps[start:stop], curve.log_sum_p2[start:stop])
            if r_squared < min_r_squared:
                continue
            span = curve.log_eps[stop - 1] - curve.log_eps[start]
            key = (stop - start, span, start)
            if best_key is None or key > best_key:
                best_key = key
                best = (float(curve.epsilons[start]), float(curve.epsilons[stop - 1]))
    return best


def _all_degenerate(series: SnapshotSeries) -> List[SnapshotD2]:
    return [SnapshotD2(t, FLAG_EMPTY if series.pickups[t].sum() == 0 else FLAG_DEGENERATE,
                       int(series.pickups[t].sum()))
            for t in range(len(series))]


def _snapshot_d2(t: int, points: np.ndarray, ladder: np.ndarray,
                 fit_range: Tuple[float, float]) -> SnapshotD2:
    if len(points) == 0:
        return SnapshotD2(snapshot=t, flag=FLAG_EMPTY, n_points=0)
    curve = correlation_sum(points, ladder)
    mask = _in_range(curve.epsilons, *fit_range)
    # A scale carries information only when the points span more than one cell
    if int((curve.occupied_cells[mask] > 1).sum()) < 3:
        return SnapshotD2(snapshot=t, flag=FLAG_DEGENERATE, n_points=len(points))
    return SnapshotD2(snapshot=t, flag=FLAG_OK, n_points=len(points),
                      estimate=fit_d2(curve, *fit_range))


def series_summary(results: Sequence[SnapshotD2]) -> D2Summary:
    """min, max and mean D₂ over the unflagged snapshots."""
    values = [r.estimate.d2 for r in results if r.flag == FLAG_OK and r.estimate is not None]
    flagged = len(results) - len(values)
    if not values:
        return D2Summary(math.nan, math.nan, math.nan, 0, flagged)
    arr = np.asarray(values)
    mean = float(np.clip(arr.mean(), arr.min(), arr.max()))
    return D2Summary(float(arr.min()), float(arr.max()), mean, len(values), flagged)


def weekly_d2_series(series: SnapshotSeries, ladder: Sequence[float],
                     fit_range: Tuple[float, float],
                     max_workers: int = 1) -> Tuple[List[SnapshotD2], D2Summary]:
    """D₂ of every snapshot's pickup locations, in snapshot order, plus a summary."""
    if len(series) == 0:
        raise InputError("series has no snapshots")
    eps = _check_ladder(ladder)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(
                lambda t: _snapshot_d2(t, series.pickup_points(t), eps, fit_range),
                range(len(series))))
    else:
        results = [_snapshot_d2(t, series.pickup_points(t), eps, fit_range)
                   for t in range(len(series))]
    return results, series_summary(results)


def neighborhood_counts(points, radii: Sequence[float], max_centers: Optional[int] = 2000,
                        seed: int = 0) -> np.ndarray:
    """Average number of other points inside a square of half-width r around a point.

    Centres are a seeded subsample of the points when there are more than
    ``max_centers``; neighbours are always counted over the full set.
    """
    pts = _as_points(points)
    radii = np.asarray(radii, dtype=np.float64)
    if not (radii > 0).all():
        raise InputError("radii must be positive")
    centers = pts
    if max_centers is not None and len(pts) > max_centers:
        rng = np.random.default_rng(seed)
        centers = pts[rng.choice(len(pts), size=max_centers, replace=False)]
    tree = cKDTree(pts)
    center_tree = cKDTree(centers)
    # Cumulative pair counts within Chebyshev distance r (self pairs included)
    pairs = center_tree.count_neighbors(tree, radii, p=np.inf)
    return (np.asarray(pairs, dtype=np.float64) - len(centers)) / len(centers)


def fit_power_law(radii: Sequence[float], counts: Sequence[float]) -> PowerLawFit:
    """Exponent and r² of counts ∝ radius^k."""
    radii = np.asarray(radii, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if len(radii) < 3 or (counts <= 0).any() or (radii <= 0).any():
        raise FitRangeError("power-law fit needs at least 3 positive (radius, count) pairs",
                            n_scales=len(radii))
    slope, _, r_squared = _ols(np.log(radii), np.log(counts))
    return PowerLawFit(exponent=slope, r_squared=r_squared, radii=radii, counts=counts)


@dataclass
class FractalReport:
    """Aggregate curve, detected range and per-snapshot D₂ of one series."""

    curve: CorrelationCurve
    fit_range: Optional[Tuple[float, float]]
    aggregate: Optional[D2Estimate]
    snapshots: List[SnapshotD2]
    summary: D2Summary


class FractalAnalysisService(LoggerMixin):
    """Runs the correlation-dimension pipeline with configured ladder and thresholds."""

    def __init__(self, ladder_floor: float = 100.0, n_scales: int = 12,
                 ladder_ceiling: Optional[float] = None,
                 fit_range: Optional[Tuple[float, float]] = None,
                 min_r_squared: float = 0.98, min_scales: int = 4, max_workers: int = 1,
                 ladder_kind: str = "dyadic"):
        if ladder_kind not in LADDER_KINDS:
            raise InputError(f"ladder_kind must be one of {LADDER_KINDS}, got {ladder_kind!r}")
        self.ladder_floor = ladder_floor
        self.ladder_ceiling = ladder_ceiling
        self.ladder_kind = ladder_kind
        self.n_scales = n_scales
        self.fit_range = fit_range
        self.min_r_squared = min_r_squared
        self.min_scales = min_scales
        self.max_workers = max_workers

    def ladder_for(self, ceiling: float) -> List[float]:
        """Scales from the floor up to ``ceiling``; may hold fewer than 3 entries."""
        if self.ladder_kind == "geometric":
            if ceiling <= self.ladder_floor:
                return [self.ladder_floor]
            return geometric_ladder(self.ladder_floor, ceiling, self.n_scales)
        ladder = dyadic_ladder(self.ladder_floor, self.n_scales)
        kept = [e for e in ladder if e <= ceiling * (1 + RANGE_TOLERANCE)]
        return kept or ladder[:1]

    def analyze(self, series: SnapshotSeries) -> FractalReport:
        """Aggregate curve over every pickup, range detection, then the per-snapshot series."""
        started = time.perf_counter()
        points = series.all_pickup_points()
        if len(points) == 0:
            raise InputError("series contains no pickups")

        ladder = self.ladder_for(self.ladder_ceiling or bounding_size(points))
        if len(ladder) < 3:
            # Pickups too concentrated for a log-log fit
            self.logger.warning(f"Only {len(ladder)} ladder scales below the point-set size; "
                                "every snapshot is flagged degenerate")
            snapshots = _all_degenerate(series)
            report = FractalReport(curve=_curve(_as_points(points), np.asarray(ladder)),
                                   fit_range=None, aggregate=None, snapshots=snapshots,
                                   summary=series_summary(snapshots))
            log_performance('fractal_analysis', time.perf_counter() - started,
                            {'snapshots': len(series)})
            return report

        curve = correlation_sum(points, ladder)
        fit_range = self.fit_range
        if fit_range is None:
            fit_range = detect_fractal_range(curve, self.min_r_squared, self.min_scales)
            if fit_range is None:
                self.logger.warning("No fractal range detected on the aggregate curve")
            else:
                self.logger.info(f"Detected fractal range {fit_range[0]:.0f}-{fit_range[1]:.0f} m")

        aggregate = None
        if fit_range is not None:
            try:
                aggregate = fit_d2(curve, *fit_range)
            except FitRangeError as e:
                self.logger.error(f"Error fitting aggregate D2: {e.message}")
                raise
            snapshots, summary = weekly_d2_series(series, ladder, fit_range, self.max_workers)
        else:
            snapshots = _all_degenerate(series)
            summary = series_summary(snapshots)

        log_performance('fractal_analysis', time.perf_counter() - started,
                        {'snapshots': len(series)})
        return FractalReport(curve=curve, fit_range=fit_range, aggregate=aggregate,
                             snapshots=snapshots, summary=summary)
