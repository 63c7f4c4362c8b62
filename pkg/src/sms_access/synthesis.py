"""Virtual PT lines: turn estimate surfaces into schedule entries.

A virtual line connects one feeder-area centroid with one hub. Its trips
depart spaced by twice the estimated expected wait of the timeslot at hand
(the headway a rider would perceive), and each trip lasts the estimated
in-vehicle time of its departure slot. Departures are generated from a
random anchor instant outward: forward steps read the wait of the previous
departure's slot, backward steps the wait of the later one.

Systems without a meaningful waiting time ("type 2": prebooked DRT,
car/bike sharing) skip the headway construction entirely; they get a single
departure exactly at the query instant per centroid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

from .geometry import LocalProjection, Point
from .geostat import EstimateSurface
from .gtfs import CalendarEntry, GTFSBundle, Route, Stop, StopIdCollisionError, StopTime, Trip, write_bundle
from .observations import Direction

log = logging.getLogger(__name__)

DAY_SECONDS = 86400

# A vanishing wait estimate would generate an unbounded number of trips;
# anything below this floor is lifted to it and flagged.
DEFAULT_WAIT_FLOOR_S = 30

VIRTUAL_STOP_PREFIX = "VC_"
VIRTUAL_ROUTE_PREFIX = "VL"
VIRTUAL_SERVICE_ID = "VSVC_ALLDAYS"


@dataclass(frozen=True)
class VirtualTrip:
    origin_stop: str
    destination_stop: str
    depart: int
    arrive: int
    direction: Direction


@dataclass(frozen=True)
class VirtualLine:
    centroid_id: int
    hub_id: str
    direction: Direction
    trips: tuple[VirtualTrip, ...]
    flags: tuple[str, ...] = ()

    @property
    def route_id(self) -> str:
        return virtual_route_id(self.direction, self.centroid_id, self.hub_id)


def virtual_route_id(direction: Direction, centroid_id: int, hub_id: str) -> str:
    return f"{VIRTUAL_ROUTE_PREFIX}_{direction.value}_{centroid_id}_{hub_id}"


def parse_virtual_route_id(route_id: str) -> tuple[Direction, int, str]:
    try:
        prefix, direction, centroid, hub = route_id.split("_", 3)
        if prefix != VIRTUAL_ROUTE_PREFIX:
            raise ValueError
        return Direction(direction), int(centroid), hub
    except ValueError:
        raise ValueError(f"not a virtual route id: {route_id!r}") from None


def is_virtual_route_id(route_id: str) -> bool:
    try:
        parse_virtual_route_id(route_id)
        return True
    except ValueError:
        return False


def centroid_stop_id(centroid_id: int) -> str:
    return f"{VIRTUAL_STOP_PREFIX}{centroid_id}"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _slot_start(t: int, slot_length: int) -> int:
    return (int(t) // slot_length) * slot_length


class _SurfaceLookup:
    """Resolve per-slot wait/travel estimates for one centroid, with
    integer-second rounding and the wait floor applied."""

    def __init__(self, surfaces: Mapping[int, EstimateSurface], centroid_id: int, wait_floor: int):
        if not surfaces:
            raise ValueError("no surfaces supplied")
        lengths = {s.slot_length for s in surfaces.values()}
        if len(lengths) != 1:
            raise ValueError(f"inconsistent slot lengths: {sorted(lengths)}")
        self.slot_length = lengths.pop()
        self.surfaces = surfaces
        self.cid = centroid_id
        self.wait_floor = wait_floor
        self.floored = False

    def covers(self, window: tuple[int, int]) -> bool:
        start, end = window
        slot = _slot_start(start, self.slot_length)
        while slot < end:
            s = self.surfaces.get(slot)
            if s is None or self.cid not in s.wait_estimate or self.cid not in s.travel_estimate:
                return False
            slot += self.slot_length
        return True

    def headway(self, t: int) -> int:
        s = self.surfaces[_slot_start(t, self.slot_length)]
        w = _round_half_up(s.wait_estimate[self.cid])
        if w < self.wait_floor:
            w = self.wait_floor
            self.floored = True
        return 2 * w

    def in_vehicle(self, t: int) -> int:
        s = self.surfaces[_slot_start(t, self.slot_length)]
        return max(1, _round_half_up(s.travel_estimate[self.cid]))


def synthesize_line(
    centroid_id: int,
    hub_id: str,
    direction: Direction,
    surfaces: Mapping[int, EstimateSurface],
    anchor: int,
    day_window: tuple[int, int],
    wait_floor: int = DEFAULT_WAIT_FLOOR_S,
) -> VirtualLine | None:
    """Generate the virtual line between one centroid and one hub.

    ``surfaces`` maps slot start seconds to the (hub, direction) estimate
    surfaces. Departures are produced from ``anchor`` forward to the window
    end and backward to the window start. Access lines run centroid-to-hub,
    egress lines hub-to-centroid. Returns None when the centroid lacks an
    estimate in any slot intersecting the window (unestimable centroid).
    """
    start, end = day_window
    if not 0 <= start < end <= DAY_SECONDS:
        raise ValueError(f"bad day window {day_window}")
    if not start <= anchor < end:
        raise ValueError(f"anchor {anchor} outside day window {day_window}")
    lookup = _SurfaceLookup(surfaces, centroid_id, wait_floor)
    if not lookup.covers(day_window):
        return None

    departures = []
    t = anchor
    while t < end:
        departures.append(t)
        t = t + lookup.headway(t)
    t = anchor
    while True:
        prev = t - lookup.headway(t)
        if prev < start:
            break
        departures.append(prev)
        t = prev
    departures.sort()

    flags = []
    if lookup.floored:
        flags.append("wait_floored")
    trips = []
    dropped = 0
    for dep in departures:
        arrive = dep + lookup.in_vehicle(dep)
        if arrive >= DAY_SECONDS:
            dropped += 1
            continue
        if direction is Direction.ACCESS:
            origin, dest = centroid_stop_id(centroid_id), hub_id
        else:
            origin, dest = hub_id, centroid_stop_id(centroid_id)
        trips.append(VirtualTrip(origin, dest, dep, arrive, direction))
    if dropped:
        flags.append("trips_past_midnight_dropped")
    return VirtualLine(
        centroid_id=centroid_id,
        hub_id=hub_id,
        direction=direction,
        trips=tuple(trips),
        flags=tuple(flags),
    )


def synthesize_type2_trip(
    centroid_id: int,
    hub_id: str,
    direction: Direction,
    query_time: int,
    surfaces: Mapping[int, EstimateSurface],
) -> VirtualTrip | None:
    """Single no-wait trip departing exactly at the query instant.

    Models systems where the vehicle is available on demand (dock-based
    sharing, prebooked DRT): the ride starts at ``query_time`` and lasts the
    estimated in-vehicle time of that timeslot. Returns None when the
    centroid is unestimable in the query's slot.
    """
    if not 0 <= query_time < DAY_SECONDS:
        raise ValueError(f"query time {query_time} outside the service day")
    lengths = {s.slot_length for s in surfaces.values()}
    if len(lengths) != 1:
        raise ValueError("inconsistent slot lengths")
    slot = _slot_start(query_time, lengths.pop())
    surface = surfaces.get(slot)
    if surface is None or centroid_id not in surface.travel_estimate:
        return None
    arrive = query_time + max(1, _round_half_up(surface.travel_estimate[centroid_id]))
    if arrive >= DAY_SECONDS:
        return None
    if direction is Direction.ACCESS:
        return VirtualTrip(centroid_stop_id(centroid_id), hub_id, query_time, arrive, direction)
    return VirtualTrip(hub_id, centroid_stop_id(centroid_id), query_time, arrive, direction)


def merge_virtual_lines(
    base: GTFSBundle,
    lines: list[VirtualLine],
    centroid_points: Mapping[int, Point],
    projection: LocalProjection | None = None,
    trip_tag: str = "",
) -> GTFSBundle:
    """Merge virtual lines into a copy of the base bundle.

    Centroids become new stops at their centers (converted to lon/lat when a
    projection is given). ``trip_tag`` is appended to trip ids; the type-2
    pipeline uses it to keep per-query-time trips distinguishable inside a
    single bundle.
    """
    merged = GTFSBundle(
        stops=list(base.stops),
        routes=list(base.routes),
        trips=list(base.trips),
        stop_times=list(base.stop_times),
        calendar=list(base.calendar),
    )
    existing_stops = base.stop_ids()
    existing_routes = {r.route_id for r in base.routes}
    existing_trips = {t.trip_id for t in base.trips}

    needed_centroids = sorted({ln.centroid_id for ln in lines if ln.trips})
    for cid in needed_centroids:
        sid = centroid_stop_id(cid)
        if sid in existing_stops:
            raise StopIdCollisionError(f"stop id {sid!r} already exists in the base bundle")
        pt = centroid_points[cid]
        lon, lat = (projection.to_lonlat(pt) if projection else (pt.x, pt.y))
        merged.stops.append(Stop(stop_id=sid, name=f"centroid {cid}", lon=lon, lat=lat))

    if any(ln.trips for ln in lines):
        if VIRTUAL_SERVICE_ID in {c.service_id for c in base.calendar}:
            raise StopIdCollisionError(f"service id {VIRTUAL_SERVICE_ID!r} already exists")
        merged.calendar.append(
            CalendarEntry(
                service_id=VIRTUAL_SERVICE_ID,
                days=(1, 1, 1, 1, 1, 1, 1),
                start_date="20200101",
                end_date="20301231",
            )
        )

    for line in sorted(lines, key=lambda ln: ln.route_id):
        if not line.trips:
            continue
        route_id = line.route_id
        if route_id in existing_routes:
            raise StopIdCollisionError(f"route id {route_id!r} already exists in the base bundle")
        merged.routes.append(
            Route(
                route_id=route_id,
                short_name=f"SMS {line.centroid_id}-{line.hub_id}",
                long_name=f"virtual {line.direction.value} line, centroid {line.centroid_id} / hub {line.hub_id}",
                route_type=3,
            )
        )
        hub_known = line.hub_id in existing_stops
        if not hub_known:
            raise ValueError(f"hub stop {line.hub_id!r} missing from the base bundle")
        for k, vt in enumerate(sorted(line.trips, key=lambda t: t.depart)):
            trip_id = f"{route_id}_{k:04d}{trip_tag}"
            if trip_id in existing_trips:
                raise StopIdCollisionError(f"trip id {trip_id!r} already exists in the base bundle")
            merged.trips.append(Trip(route_id=route_id, service_id=VIRTUAL_SERVICE_ID, trip_id=trip_id))
            merged.stop_times.append(
                StopTime(trip_id=trip_id, arrival_s=vt.depart, departure_s=vt.depart, stop_id=vt.origin_stop, sequence=1)
            )
            merged.stop_times.append(
                StopTime(trip_id=trip_id, arrival_s=vt.arrive, departure_s=vt.arrive, stop_id=vt.destination_stop, sequence=2)
            )
    return merged.sorted()


def write_gtfs(
    base: GTFSBundle,
    lines: list[VirtualLine],
    out_dir,
    centroid_points: Mapping[int, Point],
    projection: LocalProjection | None = None,
) -> GTFSBundle:
    """Merge and serialize; returns the merged bundle that was written."""
    merged = merge_virtual_lines(base, lines, centroid_points, projection)
    write_bundle(merged, out_dir)
    return merged


def extract_virtual_lines(bundle: GTFSBundle) -> list[VirtualLine]:
    """Reconstruct virtual lines from a merged bundle (inverse of
    :func:`merge_virtual_lines` up to flags)."""
    by_trip = bundle.stop_times_by_trip()
    route_dir: dict[str, tuple[Direction, int, str]] = {}
    grouped: dict[str, list[VirtualTrip]] = {}
    trip_route = {t.trip_id: t.route_id for t in bundle.trips}
    for trip_id, sts in by_trip.items():
        route_id = trip_route.get(trip_id, "")
        if not is_virtual_route_id(route_id):
            continue
        if route_id not in route_dir:
            route_dir[route_id] = parse_virtual_route_id(route_id)
        direction, _, _ = route_dir[route_id]
        first, last = sts[0], sts[-1]
        grouped.setdefault(route_id, []).append(
            VirtualTrip(first.stop_id, last.stop_id, first.departure_s, last.arrival_s, direction)
        )
    lines = []
    for route_id in sorted(grouped):
        direction, cid, hub = route_dir[route_id]
        trips = tuple(sorted(grouped[route_id], key=lambda t: t.depart))
        lines.append(VirtualLine(centroid_id=cid, hub_id=hub, direction=direction, trips=trips))
    return lines
