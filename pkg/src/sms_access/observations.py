"""Trip-observation ingestion: CSV reading, access/egress classification,
feeder-area derivation and timeslot bucketing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .geometry import HexGrid, LocalProjection, Point, distance

log = logging.getLogger(__name__)

DAY_SECONDS = 86400

# Endpoints within this distance of a hub count as the hub itself. Simulated
# trips end exactly at the stop; real data needs some slack.
DEFAULT_HUB_TOLERANCE_M = 100.0


class Direction(str, Enum):
    ACCESS = "access"
    EGRESS = "egress"


@dataclass(frozen=True)
class Observation:
    """One recorded feeder trip.

    ``origin`` is the user-side endpoint: the pickup point for access trips,
    the drop-off point for egress trips. The hub-side endpoint is implied by
    ``hub_id``.
    """

    request_time: float
    origin: Point
    hub_id: str
    wait: float
    in_vehicle: float
    direction: Direction


@dataclass
class Hub:
    """A conventional PT stop served by the feeder. ``id`` must match a
    stop_id of the base GTFS bundle."""

    id: str
    location: Point
    feeder_radius: float | None = None


@dataclass
class TimeslotDataset:
    """Observations of one (hub, direction) pair inside one timeslot
    ``[slot_start, slot_start + slot_length)``."""

    hub_id: str
    direction: Direction
    slot_start: int
    slot_length: int
    observations: list[Observation] = field(default_factory=list)


@dataclass(frozen=True)
class RejectedRow:
    line_no: int
    reason: str


@dataclass
class IngestResult:
    observations: list[Observation]
    rejected: list[RejectedRow]


OBSERVATION_COLUMNS = (
    "request_time_s",
    "origin_lon",
    "origin_lat",
    "dest_lon",
    "dest_lat",
    "hub_id",
    "wait_s",
    "in_vehicle_s",
)


def classify(
    origin: Point,
    destination: Point,
    hubs: Sequence[Hub],
    tolerance: float = DEFAULT_HUB_TOLERANCE_M,
) -> Direction | None:
    """Classify a trip by which endpoint coincides with a hub.

    Destination at a hub means access, origin at a hub means egress. When
    both endpoints match (hub-to-hub trips), access wins. Returns None when
    neither endpoint is within tolerance of any hub.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be nonnegative")
    if any(distance(destination, h.location) <= tolerance for h in hubs):
        return Direction.ACCESS
    if any(distance(origin, h.location) <= tolerance for h in hubs):
        return Direction.EGRESS
    return None


def ingest(
    path,
    hubs: Sequence[Hub],
    projection: LocalProjection | None = None,
    tolerance: float = DEFAULT_HUB_TOLERANCE_M,
) -> IngestResult:
    """Read an observation CSV, one :class:`Observation` per valid row.

    Expected header: ``request_time_s,origin_lon,origin_lat,dest_lon,
    dest_lat,hub_id,wait_s,in_vehicle_s`` with an optional trailing
    ``direction`` column (``access``/``egress``). Without that column the
    direction is inferred with :func:`classify` against the row's hub.

    Malformed rows (negative durations, unknown hubs, out-of-day request
    times, unclassifiable trips) are collected as diagnostics and skipped;
    an unreadable file or a wrong header is fatal.
    """
    by_id = {h.id: h for h in hubs}
    observations: list[Observation] = []
    rejected: list[RejectedRow] = []

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(OBSERVATION_COLUMNS).issubset(reader.fieldnames):
            raise ValueError(
                f"observation CSV must have columns {','.join(OBSERVATION_COLUMNS)}"
            )
        has_direction = "direction" in reader.fieldnames
        for line_no, rec in enumerate(reader, start=2):
            try:
                t = float(rec["request_time_s"])
                o_lon, o_lat = float(rec["origin_lon"]), float(rec["origin_lat"])
                d_lon, d_lat = float(rec["dest_lon"]), float(rec["dest_lat"])
                hub_id = rec["hub_id"].strip()
                wait = float(rec["wait_s"])
                in_vehicle = float(rec["in_vehicle_s"])
            except (TypeError, ValueError, KeyError):
                rejected.append(RejectedRow(line_no, "unparseable row"))
                continue
            if not 0 <= t < DAY_SECONDS:
                rejected.append(RejectedRow(line_no, f"request time {t} outside [0, 86400)"))
                continue
            if wait < 0 or in_vehicle < 0:
                rejected.append(RejectedRow(line_no, "negative duration"))
                continue
            hub = by_id.get(hub_id)
            if hub is None:
                rejected.append(RejectedRow(line_no, f"unknown hub {hub_id!r}"))
                continue
            if projection is not None:
                origin = projection.to_planar(o_lon, o_lat)
                dest = projection.to_planar(d_lon, d_lat)
            else:
                origin, dest = Point(o_lon, o_lat), Point(d_lon, d_lat)
            if has_direction and rec["direction"]:
                try:
                    direction = Direction(rec["direction"].strip().lower())
                except ValueError:
                    rejected.append(RejectedRow(line_no, f"bad direction {rec['direction']!r}"))
                    continue
            else:
                direction = classify(origin, dest, [hub], tolerance)
                if direction is None:
                    rejected.append(RejectedRow(line_no, "neither endpoint near the hub"))
                    continue
            user_side = origin if direction is Direction.ACCESS else dest
            observations.append(
                Observation(
                    request_time=t,
                    origin=user_side,
                    hub_id=hub_id,
                    wait=wait,
                    in_vehicle=in_vehicle,
                    direction=direction,
                )
            )
    if rejected:
        log.warning("%s: rejected %d of %d rows", path, len(rejected), len(rejected) + len(observations))
    return IngestResult(observations, rejected)


def derive_feeder_area(
    hub: Hub,
    obs: Iterable[Observation],
    grid: HexGrid,
    max_radius: float | None = None,
) -> set[int]:
    """Derive the hub's feeder area from its observed trips.

    The feeder radius is the largest distance between the hub and any of its
    observations' user-side endpoints (optionally capped to discard
    outliers); the feeder area is every cell whose centroid lies within that
    radius. Sets ``hub.feeder_radius`` as a side effect.
    """
    radii = [distance(o.origin, hub.location) for o in obs if o.hub_id == hub.id]
    if not radii:
        log.warning("hub %s has no observations; empty feeder area", hub.id)
        return set()
    radius = max(radii)
    if max_radius is not None:
        radius = min(radius, max_radius)
    hub.feeder_radius = radius
    return {c.id for c in grid.cells if distance(c.center, hub.location) <= radius}


def bucket(obs: Iterable[Observation], slot_length: int) -> list[TimeslotDataset]:
    """Partition observations into (hub, direction, timeslot) datasets.

    Slots are half-open ``[k * slot_length, (k+1) * slot_length)`` and
    slot_length must divide the day. Observations inside each dataset are
    sorted by a total key, so the result is independent of input order.
    """
    if slot_length <= 0 or DAY_SECONDS % slot_length:
        raise ValueError(f"slot_length {slot_length} must divide {DAY_SECONDS}")
    groups: dict[tuple[str, Direction, int], list[Observation]] = {}
    for o in obs:
        slot_start = int(o.request_time // slot_length) * slot_length
        groups.setdefault((o.hub_id, o.direction, slot_start), []).append(o)
    datasets = []
    for (hub_id, direction, slot_start), members in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])
    ):
        members.sort(key=lambda o: (o.request_time, o.origin.x, o.origin.y, o.wait, o.in_vehicle))
        datasets.append(
            TimeslotDataset(
                hub_id=hub_id,
                direction=direction,
                slot_start=slot_start,
                slot_length=slot_length,
                observations=members,
            )
        )
    return datasets
