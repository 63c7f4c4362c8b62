"""Ordinary kriging of waiting and in-vehicle times.

The estimation chain per (hub, direction, timeslot) dataset is:

1. experimental semivariogram: half squared differences of sample values,
   averaged over distance bins of width ``lag_increment``;
2. bounded linear theoretical model, range fixed (3000 m by default), sill
   read off the experimental plateau;
3. constrained weight solve: minimize the estimation variance subject to
   the weights summing to one (Lagrange formulation), restricted to samples
   within the model range of the query point.

Estimates are convex-like combinations of observed values; individual
weights may be negative, so durations are clamped at zero downstream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Point
from .observations import Direction, TimeslotDataset

log = logging.getLogger(__name__)

DEFAULT_LAG_M = 100.0
DEFAULT_RANGE_M = 3000.0
DEFAULT_MIN_SAMPLES = 5

# Sample locations closer than this are merged before assembling the kriging
# system; exact duplicates would make it singular.
DEDUP_DISTANCE_M = 1.0


class UnestimableError(ValueError):
    """No sample within the variogram range of the query point."""


@dataclass(frozen=True)
class VariogramBin:
    lag: float
    semivariance: float
    pair_count: int


@dataclass(frozen=True)
class ExperimentalVariogram:
    """Binned mean semivariances. Bins sit at integer multiples of the lag
    increment; empty bins are omitted."""

    lag_increment: float
    max_lag: float
    bins: tuple[VariogramBin, ...]


@dataclass(frozen=True)
class VariogramModel:
    """Bounded linear semivariogram: gamma(d) = nugget + sill * min(d, range)/range
    for d > 0, and gamma(0) = 0."""

    sill: float
    range_m: float
    nugget: float = 0.0

    def __post_init__(self):
        if self.range_m <= 0:
            raise ValueError("variogram range must be positive")
        if self.sill < 0 or self.nugget < 0:
            raise ValueError("sill and nugget must be nonnegative")

    @property
    def degenerate(self) -> bool:
        """True when the experimental surface carried no variance at all."""
        return self.sill <= 0.0

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        gamma = self.nugget + self.sill * np.minimum(d, self.range_m) / self.range_m
        return np.where(d > 0.0, gamma, 0.0)


@dataclass(frozen=True)
class KrigingSystem:
    """Solved weights for one query point.

    ``method`` is "ok" for an ordinary-kriging solve and "idw" when a
    singular system forced the inverse-distance-weighting fallback.
    """

    locations: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    lagrange_multiplier: float
    estimate: float
    kriging_variance: float
    method: str = "ok"


@dataclass
class EstimateSurface:
    """Per-centroid expected waiting and in-vehicle seconds for one
    (hub, direction, timeslot)."""

    hub_id: str
    direction: Direction
    slot_start: int
    slot_length: int
    wait_estimate: dict[int, float] = field(default_factory=dict)
    travel_estimate: dict[int, float] = field(default_factory=dict)
    support: dict[int, int] = field(default_factory=dict)
    flags: dict[int, tuple[str, ...]] = field(default_factory=dict)
    unestimable: frozenset[int] = frozenset()
    fallback: str | None = None


def _as_arrays(samples: Sequence[tuple[Point, float]]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([(p.x, p.y) for p, _ in samples], dtype=float)
    vals = np.array([v for _, v in samples], dtype=float)
    return pts, vals


def experimental_variogram(
    samples: Sequence[tuple[Point, float]],
    lag_increment: float = DEFAULT_LAG_M,
    max_lag: float = 2 * DEFAULT_RANGE_M,
) -> ExperimentalVariogram:
    """Experimental semivariogram over all unordered sample pairs.

    Parameters
    ----------
    samples : sequence of (Point, value)
        At least two samples.
    lag_increment : float
        Bin width; pair (i, j) lands in the bin whose center ``n * lag`` is
        nearest to the pair distance, i.e. bins are
        ``[n*lag - lag/2, n*lag + lag/2)``.
    max_lag : float
        Pairs binned beyond this distance are ignored.

    Returns
    -------
    ExperimentalVariogram
        Mean of ``0.5 * (v_i - v_j)**2`` per nonempty bin, with pair counts.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples for a semivariogram")
    if lag_increment <= 0:
        raise ValueError("lag_increment must be positive")
    pts, vals = _as_arrays(samples)
    iu, ju = np.triu_indices(len(samples), k=1)
    dx = pts[iu, 0] - pts[ju, 0]
    dy = pts[iu, 1] - pts[ju, 1]
    d = np.sqrt(dx * dx + dy * dy)
    dv = vals[iu] - vals[ju]
    gamma = 0.5 * dv * dv

    n_bin = np.floor(d / lag_increment + 0.5).astype(np.int64)
    keep = n_bin * lag_increment <= max_lag
    n_bin, gamma = n_bin[keep], gamma[keep]
    if n_bin.size == 0:
        return ExperimentalVariogram(lag_increment, max_lag, ())

    n_max = int(n_bin.max())
    sums = np.zeros(n_max + 1)
    counts = np.zeros(n_max + 1, dtype=np.int64)
    np.add.at(sums, n_bin, gamma)
    np.add.at(counts, n_bin, 1)
    bins = tuple(
        VariogramBin(lag=n * lag_increment, semivariance=sums[n] / counts[n], pair_count=int(counts[n]))
        for n in range(n_max + 1)
        if counts[n] > 0
    )
    return ExperimentalVariogram(lag_increment, max_lag, bins)


def fit_bounded_linear(ev: ExperimentalVariogram, range_m: float = DEFAULT_RANGE_M) -> VariogramModel:
    """Fit a bounded linear model with the range held fixed.

    The sill is the pair-count-weighted mean of the bin semivariances on the
    plateau (lags at or beyond the range). When no bin reaches the range,
    all bins are used instead, which overstates nothing worse than the
    overall spread. A zero sill marks the model as degenerate; callers fall
    back to a constant estimator in that case.
    """
    if not ev.bins:
        raise ValueError("experimental variogram has no bins")
    plateau = [b for b in ev.bins if b.lag >= range_m]
    if not plateau:
        plateau = list(ev.bins)
    weight = sum(b.pair_count for b in plateau)
    sill = sum(b.semivariance * b.pair_count for b in plateau) / weight
    return VariogramModel(sill=sill, range_m=range_m)


def _dedup(pts: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge samples closer than DEDUP_DISTANCE_M by averaging their values."""
    reps: list[tuple[float, float]] = []
    sums: list[float] = []
    counts: list[int] = []
    for (x, y), v in zip(pts, vals):
        for k, (rx, ry) in enumerate(reps):
            if math.hypot(x - rx, y - ry) < DEDUP_DISTANCE_M:
                sums[k] += v
                counts[k] += 1
                break
        else:
            reps.append((x, y))
            sums.append(v)
            counts.append(1)
    out_pts = np.array(reps, dtype=float)
    out_vals = np.array(sums, dtype=float) / np.array(counts, dtype=float)
    return out_pts, out_vals


def _idw(query: np.ndarray, pts: np.ndarray, vals: np.ndarray) -> np.ndarray:
    d = np.sqrt(((pts - query) ** 2).sum(axis=1))
    at_query = d <= 0.0
    weights = np.zeros(len(pts))
    if at_query.any():
        weights[at_query] = 1.0 / at_query.sum()
    else:
        weights = 1.0 / d**2
        weights /= weights.sum()
    return weights


def krige(
    query: Point,
    samples: Sequence[tuple[Point, float]],
    model: VariogramModel,
) -> KrigingSystem:
    """Ordinary-kriging estimate at ``query``.

    Duplicate sample locations are merged first; samples farther than the
    model range from the query are excluded, so they cannot influence the
    estimate. Solves the (n+1) x (n+1) Lagrange system; a singular or
    non-finite solve falls back to inverse-distance weighting, flagged via
    ``method="idw"``.

    Raises
    ------
    UnestimableError
        If no sample lies within the model range of the query.
    """
    if not samples:
        raise UnestimableError("no samples supplied")
    pts, vals = _as_arrays(samples)
    pts, vals = _dedup(pts, vals)

    q = np.array([query.x, query.y], dtype=float)
    d_query = np.sqrt(((pts - q) ** 2).sum(axis=1))
    in_range = d_query <= model.range_m
    if not in_range.any():
        raise UnestimableError(
            f"no sample within {model.range_m} m of ({query.x}, {query.y})"
        )
    pts, vals, d_query = pts[in_range], vals[in_range], d_query[in_range]
    n = len(pts)

    dx = pts[:, 0:1] - pts[:, 0:1].T
    dy = pts[:, 1:2] - pts[:, 1:2].T
    gamma_ij = model(np.sqrt(dx * dx + dy * dy))
    gamma_i0 = model(d_query)

    a = np.empty((n + 1, n + 1))
    a[:n, :n] = gamma_ij
    a[:n, n] = 1.0
    a[n, :n] = 1.0
    a[n, n] = 0.0
    b = np.empty(n + 1)
    b[:n] = gamma_i0
    b[n] = 1.0

    method = "ok"
    try:
        sol = np.linalg.solve(a, b)
        weights = sol[:n]
        mu = float(sol[n])
        if not np.all(np.isfinite(weights)) or abs(weights.sum() - 1.0) > 1e-6:
            raise np.linalg.LinAlgError("unreliable solve")
    except np.linalg.LinAlgError:
        weights = _idw(q, pts, vals)
        mu = float("nan")
        method = "idw"
        log.debug("kriging system singular at (%s, %s); idw fallback", query.x, query.y)

    estimate = float(weights @ vals)
    variance = float(2.0 * weights @ gamma_i0 - weights @ gamma_ij @ weights)
    return KrigingSystem(
        locations=pts,
        values=vals,
        weights=weights,
        lagrange_multiplier=mu,
        estimate=estimate,
        kriging_variance=variance,
        method=method,
    )


def _constant_surface(
    ds: TimeslotDataset,
    centroids: Mapping[int, Point],
    wait_value: float,
    travel_value: float,
    fallback: str,
) -> EstimateSurface:
    n = len(ds.observations)
    return EstimateSurface(
        hub_id=ds.hub_id,
        direction=ds.direction,
        slot_start=ds.slot_start,
        slot_length=ds.slot_length,
        wait_estimate={cid: wait_value for cid in centroids},
        travel_estimate={cid: travel_value for cid in centroids},
        support={cid: n for cid in centroids},
        flags={},
        unestimable=frozenset(),
        fallback=fallback,
    )


def estimate_surface(
    ds: TimeslotDataset,
    centroids: Mapping[int, Point],
    lag_increment: float = DEFAULT_LAG_M,
    range_m: float = DEFAULT_RANGE_M,
    min_samples: int = DEFAULT_MIN_SAMPLES,
    max_lag: float | None = None,
) -> EstimateSurface:
    """Krige the waiting-time and in-vehicle-time fields of one dataset over
    the given feeder-area centroids.

    Datasets below ``min_samples`` observations fall back to the dataset
    mean per field (kriging on a handful of points is unstable); the surface
    records this via ``fallback="mean"``. Negative kriging estimates are
    clamped to zero and flagged. Centroids with no sample within range are
    listed in ``unestimable`` and carry no estimates.
    """
    if not ds.observations:
        raise ValueError("cannot estimate from an empty dataset")
    if not centroids:
        return EstimateSurface(
            hub_id=ds.hub_id,
            direction=ds.direction,
            slot_start=ds.slot_start,
            slot_length=ds.slot_length,
        )
    waits = [o.wait for o in ds.observations]
    travels = [o.in_vehicle for o in ds.observations]
    if len(ds.observations) < min_samples:
        return _constant_surface(
            ds, centroids, float(np.mean(waits)), float(np.mean(travels)), fallback="mean"
        )

    if max_lag is None:
        max_lag = 2.0 * range_m
    points = [o.origin for o in ds.observations]
    surface = EstimateSurface(
        hub_id=ds.hub_id,
        direction=ds.direction,
        slot_start=ds.slot_start,
        slot_length=ds.slot_length,
    )
    unestimable: set[int] = set()
    flags: dict[int, list[str]] = {}

    def note_support(cid: int, count: int) -> None:
        # Both fields share one support figure; keep the smaller one.
        prev = surface.support.get(cid)
        surface.support[cid] = count if prev is None else min(prev, count)

    for name, values, out in (
        ("wait", waits, surface.wait_estimate),
        ("travel", travels, surface.travel_estimate),
    ):
        samples = list(zip(points, values))
        try:
            ev = experimental_variogram(samples, lag_increment=lag_increment, max_lag=max_lag)
            model = fit_bounded_linear(ev, range_m=range_m)
        except ValueError:
            mean = float(np.mean(values))
            for cid in centroids:
                out[cid] = mean
                flags.setdefault(cid, []).append(f"{name}:variogram_fallback")
                note_support(cid, len(samples))
            continue
        if model.degenerate:
            # All pairwise differences vanish: the field is constant.
            mean = float(np.mean(values))
            for cid in centroids:
                out[cid] = mean
                flags.setdefault(cid, []).append(f"{name}:degenerate_variogram")
                note_support(cid, len(samples))
            continue
        for cid, center in centroids.items():
            if cid in unestimable:
                continue
            try:
                system = krige(center, samples, model)
            except UnestimableError:
                unestimable.add(cid)
                continue
            value = system.estimate
            if value < 0.0:
                value = 0.0
                flags.setdefault(cid, []).append(f"{name}:clamped")
            if system.method == "idw":
                flags.setdefault(cid, []).append(f"{name}:idw")
            out[cid] = value
            note_support(cid, len(system.weights))

    for cid in unestimable:
        surface.wait_estimate.pop(cid, None)
        surface.travel_estimate.pop(cid, None)
        surface.support.pop(cid, None)
        flags.pop(cid, None)
    surface.unestimable = frozenset(unestimable)
    surface.flags = {cid: tuple(v) for cid, v in flags.items()}
    return surface
