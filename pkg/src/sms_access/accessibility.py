"""Isochrone accessibility scores and baseline-vs-feeder comparison.

A cell's score at a departure time is the sum of opportunities over all
cells reachable within the time budget tau (inclusive threshold; the origin
cell always counts since its own travel time is zero). The default
semantics counts residents ("sociality score"); any opportunity layer works
through the same CSV, and a diversity variant counts distinct opportunity
categories instead of totals.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Set

import numpy as np

from .geometry import HexGrid, LocalProjection, grid_geojson
from .router import TravelTimeMatrix

log = logging.getLogger(__name__)

# Baseline score below which cells count toward the headline statistic
# ("mean relative gain over poorly connected cells").
DEFAULT_HEADLINE_BASELINE = 200_000.0


@dataclass(frozen=True)
class AccessibilityScore:
    centroid_id: int
    depart: int
    reachable_opportunities: float
    reachable_cells: int


@dataclass(frozen=True)
class ImprovementRecord:
    centroid_id: int
    baseline: float
    with_sms: float
    absolute_gain: float
    relative_gain: float
    newly_connected: bool


def _matrix_slice(matrix: TravelTimeMatrix, grid: HexGrid, depart: int) -> tuple[np.ndarray, list[int]]:
    if depart not in matrix.depart_times:
        raise ValueError(f"departure {depart} not covered by the matrix")
    grid_ids = [c.id for c in grid.cells]
    missing = set(grid_ids) - set(matrix.cell_ids)
    if missing:
        raise ValueError(f"matrix does not cover centroids {sorted(missing)}")
    t = matrix.depart_times.index(depart)
    pos = [matrix.cell_ids.index(cid) for cid in grid_ids]
    sub = matrix.seconds[t][np.ix_(pos, pos)]
    return sub, grid_ids


def score(
    matrix: TravelTimeMatrix,
    grid: HexGrid,
    tau: float,
    depart: int,
) -> list[AccessibilityScore]:
    """Opportunities reachable within ``tau`` seconds per centroid."""
    sub, grid_ids = _matrix_slice(matrix, grid, depart)
    opps = np.array([c.opportunities for c in grid.cells], dtype=float)
    reachable = np.isfinite(sub) & (sub <= tau)
    totals = reachable @ opps
    counts = reachable.sum(axis=1)
    return [
        AccessibilityScore(
            centroid_id=cid,
            depart=depart,
            reachable_opportunities=float(totals[i]),
            reachable_cells=int(counts[i]),
        )
        for i, cid in enumerate(grid_ids)
    ]


def score_diversity(
    matrix: TravelTimeMatrix,
    grid: HexGrid,
    categories: Mapping[int, Set[str]],
    tau: float,
    depart: int,
) -> list[AccessibilityScore]:
    """Variant counting distinct reachable opportunity categories (union
    over reachable cells) instead of opportunity totals."""
    sub, grid_ids = _matrix_slice(matrix, grid, depart)
    reachable = np.isfinite(sub) & (sub <= tau)
    out = []
    for i, cid in enumerate(grid_ids):
        union: set[str] = set()
        for j, other in enumerate(grid_ids):
            if reachable[i, j]:
                union |= set(categories.get(other, ()))
        out.append(
            AccessibilityScore(
                centroid_id=cid,
                depart=depart,
                reachable_opportunities=float(len(union)),
                reachable_cells=int(reachable[i].sum()),
            )
        )
    return out


def daily_average(scores: Iterable[AccessibilityScore]) -> dict[int, float]:
    """Arithmetic mean of scores per centroid over the sampled departures."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for s in scores:
        sums[s.centroid_id] = sums.get(s.centroid_id, 0.0) + s.reachable_opportunities
        counts[s.centroid_id] = counts.get(s.centroid_id, 0) + 1
    if not sums:
        raise ValueError("no scores to average")
    return {cid: sums[cid] / counts[cid] for cid in sorted(sums)}


def compare(
    baseline: Mapping[int, float],
    with_sms: Mapping[int, float],
) -> list[ImprovementRecord]:
    """Per-centroid absolute and relative gains of the feeder scenario.

    Relative gain divides by max(baseline, 1) so newly connected cells
    (zero baseline) stay finite; they are flagged separately.
    """
    if set(baseline) != set(with_sms):
        diff = sorted(set(baseline) ^ set(with_sms))
        raise ValueError(f"centroid sets differ: {diff}")
    records = []
    for cid in sorted(baseline):
        b, w = baseline[cid], with_sms[cid]
        gain = w - b
        records.append(
            ImprovementRecord(
                centroid_id=cid,
                baseline=b,
                with_sms=w,
                absolute_gain=gain,
                relative_gain=gain / max(b, 1.0),
                newly_connected=(b == 0.0 and gain > 0.0),
            )
        )
    return records


def mean_relative_gain(
    records: Iterable[ImprovementRecord],
    baseline_below: float = DEFAULT_HEADLINE_BASELINE,
) -> float:
    """Mean relative gain over cells whose baseline score is below the
    threshold; NaN when no cell qualifies."""
    gains = [r.relative_gain for r in records if r.baseline < baseline_below]
    return float(np.mean(gains)) if gains else math.nan


def write_scores_csv(path, scores: Iterable[AccessibilityScore]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["centroid_id", "depart", "score"])
        for s in sorted(scores, key=lambda s: (s.depart, s.centroid_id)):
            w.writerow([s.centroid_id, s.depart, repr(s.reachable_opportunities)])


def write_improvement_csv(path, records: Iterable[ImprovementRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["centroid_id", "baseline", "with_sms", "absolute_gain", "relative_gain", "newly_connected"]
        )
        for r in sorted(records, key=lambda r: r.centroid_id):
            w.writerow(
                [
                    r.centroid_id,
                    repr(r.baseline),
                    repr(r.with_sms),
                    repr(r.absolute_gain),
                    repr(r.relative_gain),
                    int(r.newly_connected),
                ]
            )


def improvement_geojson(
    grid: HexGrid,
    records: Iterable[ImprovementRecord],
    projection: LocalProjection | None = None,
) -> dict:
    props = {
        r.centroid_id: {
            "baseline": r.baseline,
            "with_sms": r.with_sms,
            "absolute_gain": r.absolute_gain,
            "relative_gain": r.relative_gain,
            "newly_connected": r.newly_connected,
        }
        for r in records
    }
    return grid_geojson(grid, projection=projection, extra_properties=props)
