"""Planar geometry of the study area: local projection, hexagonal
tessellation, point location and distances.

All internal coordinates are meters in a single planar frame. Longitude and
latitude appear only at the ingestion and export boundaries, where a
:class:`LocalProjection` converts them once.

Hexagons are flat-top regular hexagons of side ``s`` (side equals
circumradius). Lattice columns are spaced ``1.5 s`` apart in x, rows
``sqrt(3) s`` apart in y, with odd columns shifted up by half a row. The
lattice is anchored so that the bounds center is always a cell center, which
makes tessellation deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
SQRT3 = math.sqrt(3.0)

# Relative tolerance used when comparing candidate distances in locate();
# boundary points sit on two or three hexagons and must tie-break by id.
_TIE_RTOL = 1e-9


class PointOutsideGrid(LookupError):
    """Raised by :func:`locate` for points beyond the tessellated area."""


@dataclass(frozen=True)
class Point:
    """A location in the planar frame, meters."""

    x: float
    y: float


def distance(a: Point, b: Point) -> float:
    """Euclidean distance in meters between two planar points."""
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class LocalProjection:
    """Equidistant cylindrical projection tangent at the study-area center.

    Good to a fraction of a percent at metropolitan scale, which is far below
    the kilometre-sized cells used downstream. Not suitable for continental
    extents.
    """

    lon0: float
    lat0: float

    def _scales(self):
        kx = EARTH_RADIUS_M * math.cos(math.radians(self.lat0)) * math.pi / 180.0
        ky = EARTH_RADIUS_M * math.pi / 180.0
        return kx, ky

    def to_planar(self, lon: float, lat: float) -> Point:
        kx, ky = self._scales()
        return Point((lon - self.lon0) * kx, (lat - self.lat0) * ky)

    def to_lonlat(self, p: Point) -> tuple[float, float]:
        kx, ky = self._scales()
        return (self.lon0 + p.x / kx, self.lat0 + p.y / ky)


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned bounding box in planar meters."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate bounds: {self}")

    @property
    def center(self) -> Point:
        return Point(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def contains(self, p: Point) -> bool:
        return self.xmin <= p.x <= self.xmax and self.ymin <= p.y <= self.ymax


@dataclass
class HexCell:
    """One tessellation cell. ``opportunities`` is filled at ingestion."""

    id: int
    center: Point
    side: float
    qr: tuple[int, int]
    opportunities: float = 0.0

    def polygon(self) -> list[tuple[float, float]]:
        """Vertices of the flat-top hexagon, counter-clockwise, not closed."""
        s = self.side
        cx, cy = self.center.x, self.center.y
        h = 0.5 * SQRT3 * s
        return [
            (cx + s, cy),
            (cx + 0.5 * s, cy + h),
            (cx - 0.5 * s, cy + h),
            (cx - s, cy),
            (cx - 0.5 * s, cy - h),
            (cx + 0.5 * s, cy - h),
        ]


# Separating axes for a flat-top hexagon against an axis-aligned box:
# the box axes plus the hexagon's slanted edge normals. Each entry is
# (unit vector, hexagon half-extent along it in units of side).
_SAT_AXES = (
    ((1.0, 0.0), 1.0),
    ((0.0, 1.0), 0.5 * SQRT3),
    ((0.5 * SQRT3, 0.5), 0.5 * SQRT3),
    ((0.5 * SQRT3, -0.5), 0.5 * SQRT3),
)


def _hex_overlaps_box(center: Point, side: float, b: Bounds) -> bool:
    """True if the hexagon and the box overlap with positive area."""
    bcx = 0.5 * (b.xmin + b.xmax)
    bcy = 0.5 * (b.ymin + b.ymax)
    hw = 0.5 * (b.xmax - b.xmin)
    hh = 0.5 * (b.ymax - b.ymin)
    dx = center.x - bcx
    dy = center.y - bcy
    for (ux, uy), hex_extent in _SAT_AXES:
        sep = abs(dx * ux + dy * uy)
        box_extent = hw * abs(ux) + hh * abs(uy)
        if sep >= hex_extent * side + box_extent:
            return False
    return True


@dataclass
class HexGrid:
    """Flat-top hexagonal tessellation covering a bounding box.

    Cells are every lattice hexagon that overlaps the bounds with positive
    area, so cells on the rim may have centers slightly outside the box;
    this is what makes point-to-cell lookup total over the bounds. Ids are
    assigned in (column, row) order and are stable across runs.
    """

    side: float
    bounds: Bounds
    anchor: Point
    cells: list[HexCell]
    _by_qr: dict[tuple[int, int], HexCell] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self._by_qr:
            self._by_qr = {c.qr: c for c in self.cells}

    def __len__(self) -> int:
        return len(self.cells)

    def cell(self, cell_id: int) -> HexCell:
        return self.cells[cell_id]

    def centroids(self) -> dict[int, Point]:
        return {c.id: c.center for c in self.cells}

    def total_opportunities(self) -> float:
        return sum(c.opportunities for c in self.cells)


def _lattice_center(anchor: Point, side: float, q: int, r: int) -> Point:
    x = anchor.x + 1.5 * side * q
    y = anchor.y + SQRT3 * side * r
    if q % 2:
        y += 0.5 * SQRT3 * side
    return Point(x, y)


def tessellate(bounds: Bounds, side: float) -> HexGrid:
    """Tessellate ``bounds`` with flat-top hexagons of the given side.

    Every interior point of the bounds maps to exactly one retained cell;
    boundary points are resolved by :func:`locate`'s lowest-id tie-break.
    """
    if side <= 0:
        raise ValueError(f"hexagon side must be positive, got {side}")
    anchor = bounds.center
    col = 1.5 * side
    row = SQRT3 * side

    q_lo = math.floor((bounds.xmin - side - anchor.x) / col) - 1
    q_hi = math.ceil((bounds.xmax + side - anchor.x) / col) + 1
    r_lo = math.floor((bounds.ymin - row - anchor.y) / row) - 1
    r_hi = math.ceil((bounds.ymax + row - anchor.y) / row) + 1

    cells: list[HexCell] = []
    for q in range(q_lo, q_hi + 1):
        for r in range(r_lo, r_hi + 1):
            center = _lattice_center(anchor, side, q, r)
            if _hex_overlaps_box(center, side, bounds):
                cells.append(HexCell(id=-1, center=center, side=side, qr=(q, r)))
    cells.sort(key=lambda c: c.qr)
    for i, c in enumerate(cells):
        c.id = i
    return HexGrid(side=side, bounds=bounds, anchor=anchor, cells=cells)


def locate(grid: HexGrid, p: Point) -> HexCell:
    """Return the cell whose hexagon contains ``p``.

    Hexagons are the Voronoi cells of their centers, so containment is a
    nearest-center query over the lattice neighborhood of ``p``. Equidistant
    candidates (edge or corner points) resolve to the lowest cell id.
    """
    col = 1.5 * grid.side
    row = SQRT3 * grid.side
    qf = (p.x - grid.anchor.x) / col
    candidates: list[HexCell] = []
    for q in range(math.floor(qf) - 1, math.floor(qf) + 2):
        off = 0.5 * row if q % 2 else 0.0
        rf = (p.y - grid.anchor.y - off) / row
        for r in range(math.floor(rf) - 1, math.floor(rf) + 2):
            cell = grid._by_qr.get((q, r))
            if cell is not None:
                candidates.append(cell)
    if not candidates:
        raise PointOutsideGrid(f"point ({p.x}, {p.y}) is outside the grid")
    best = min(distance(p, c.center) for c in candidates)
    if best > grid.side * (1.0 + _TIE_RTOL):
        raise PointOutsideGrid(f"point ({p.x}, {p.y}) is outside the grid")
    tol = _TIE_RTOL * max(best, 1.0)
    tied = [c for c in candidates if distance(p, c.center) <= best + tol]
    return min(tied, key=lambda c: c.id)


def load_opportunities(
    path,
    grid: HexGrid,
    projection: LocalProjection | None = None,
) -> tuple[dict[int, set[str]], int]:
    """Aggregate an opportunity CSV (lon, lat, count[, category]) into cells.

    Adds counts onto ``cell.opportunities``. Returns per-cell category sets
    (empty mapping when the file has no category column) and the number of
    rows skipped because they fall outside the grid.
    """
    categories: dict[int, set[str]] = {}
    skipped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"lon", "lat", "count"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"opportunity CSV needs columns {sorted(required)}")
        has_category = "category" in reader.fieldnames
        for rec in reader:
            lon, lat, count = float(rec["lon"]), float(rec["lat"]), float(rec["count"])
            if count < 0:
                raise ValueError(f"negative opportunity count in {path}: {rec}")
            pt = projection.to_planar(lon, lat) if projection else Point(lon, lat)
            try:
                cell = locate(grid, pt)
            except PointOutsideGrid:
                skipped += 1
                continue
            cell.opportunities += count
            if has_category and rec["category"] and count > 0:
                categories.setdefault(cell.id, set()).add(rec["category"])
    if skipped:
        log.warning("%d opportunity rows fell outside the grid", skipped)
    return categories, skipped


def grid_geojson(
    grid: HexGrid,
    projection: LocalProjection | None = None,
    extra_properties: Mapping[int, Mapping] | None = None,
) -> dict:
    """GeoJSON FeatureCollection of the grid's hexagons.

    Vertices are converted back to lon/lat when a projection is given,
    otherwise planar meters are emitted as-is.
    """
    features = []
    for cell in grid.cells:
        ring = cell.polygon()
        ring.append(ring[0])
        if projection is not None:
            coords = [list(projection.to_lonlat(Point(x, y))) for x, y in ring]
        else:
            coords = [[x, y] for x, y in ring]
        props = {"id": cell.id, "opportunities": cell.opportunities}
        if extra_properties and cell.id in extra_properties:
            props.update(extra_properties[cell.id])
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [coords]},
                "properties": props,
            }
        )
    return {"type": "FeatureCollection", "features": features}


def dump_geojson(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
