"""Minimal GTFS bundle: the five text files the pipeline consumes and
produces (stops, routes, trips, stop_times, calendar).

Serialization is canonical — fixed headers, rows sorted by their natural
keys — so writing a parsed bundle back is byte-identical and pipeline
re-runs can be compared file by file.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path


class StopIdCollisionError(ValueError):
    """A synthesized id collides with an id already present in the base."""


def parse_gtfs_time(text: str) -> int:
    """'HH:MM:SS' to seconds; hours may exceed 24 in base feeds."""
    h, m, s = text.strip().split(":")
    return int(h) * 3600 + int(m) * 60 + int(s)


def format_gtfs_time(seconds: int) -> str:
    if seconds < 0:
        raise ValueError("GTFS times are nonnegative")
    h, rest = divmod(int(seconds), 3600)
    m, s = divmod(rest, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


@dataclass(frozen=True)
class Stop:
    stop_id: str
    name: str
    lon: float
    lat: float


@dataclass(frozen=True)
class Route:
    route_id: str
    short_name: str
    long_name: str
    route_type: int


@dataclass(frozen=True)
class Trip:
    route_id: str
    service_id: str
    trip_id: str


@dataclass(frozen=True)
class StopTime:
    trip_id: str
    arrival_s: int
    departure_s: int
    stop_id: str
    sequence: int


@dataclass(frozen=True)
class CalendarEntry:
    service_id: str
    days: tuple[int, int, int, int, int, int, int]
    start_date: str
    end_date: str


_DAY_COLUMNS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")


@dataclass
class GTFSBundle:
    stops: list[Stop] = field(default_factory=list)
    routes: list[Route] = field(default_factory=list)
    trips: list[Trip] = field(default_factory=list)
    stop_times: list[StopTime] = field(default_factory=list)
    calendar: list[CalendarEntry] = field(default_factory=list)

    def sorted(self) -> "GTFSBundle":
        return GTFSBundle(
            stops=sorted(self.stops, key=lambda s: s.stop_id),
            routes=sorted(self.routes, key=lambda r: r.route_id),
            trips=sorted(self.trips, key=lambda t: (t.route_id, t.trip_id)),
            stop_times=sorted(self.stop_times, key=lambda st: (st.trip_id, st.sequence)),
            calendar=sorted(self.calendar, key=lambda c: c.service_id),
        )

    def stop_ids(self) -> set[str]:
        return {s.stop_id for s in self.stops}

    def stop_times_by_trip(self) -> dict[str, list[StopTime]]:
        by_trip: dict[str, list[StopTime]] = {}
        for st in self.stop_times:
            by_trip.setdefault(st.trip_id, []).append(st)
        for sts in by_trip.values():
            sts.sort(key=lambda st: st.sequence)
        return by_trip


def read_bundle(directory) -> GTFSBundle:
    """Parse a GTFS directory. stops/routes/trips/stop_times are required,
    calendar is optional."""
    directory = Path(directory)
    bundle = GTFSBundle()

    def rows(name, required=True):
        path = directory / name
        if not path.exists():
            if required:
                raise FileNotFoundError(f"missing GTFS file {path}")
            return
        with open(path, newline="", encoding="utf-8-sig") as fh:
            yield from csv.DictReader(fh)

    for rec in rows("stops.txt"):
        bundle.stops.append(
            Stop(
                stop_id=rec["stop_id"].strip(),
                name=rec.get("stop_name", "").strip(),
                lon=float(rec["stop_lon"]),
                lat=float(rec["stop_lat"]),
            )
        )
    for rec in rows("routes.txt"):
        bundle.routes.append(
            Route(
                route_id=rec["route_id"].strip(),
                short_name=rec.get("route_short_name", "").strip(),
                long_name=rec.get("route_long_name", "").strip(),
                route_type=int(rec.get("route_type", 3) or 3),
            )
        )
    for rec in rows("trips.txt"):
        bundle.trips.append(
            Trip(
                route_id=rec["route_id"].strip(),
                service_id=rec["service_id"].strip(),
                trip_id=rec["trip_id"].strip(),
            )
        )
    for rec in rows("stop_times.txt"):
        bundle.stop_times.append(
            StopTime(
                trip_id=rec["trip_id"].strip(),
                arrival_s=parse_gtfs_time(rec["arrival_time"]),
                departure_s=parse_gtfs_time(rec["departure_time"]),
                stop_id=rec["stop_id"].strip(),
                sequence=int(rec["stop_sequence"]),
            )
        )
    for rec in rows("calendar.txt", required=False):
        bundle.calendar.append(
            CalendarEntry(
                service_id=rec["service_id"].strip(),
                days=tuple(int(rec[d]) for d in _DAY_COLUMNS),
                start_date=rec["start_date"].strip(),
                end_date=rec["end_date"].strip(),
            )
        )
    return bundle


def write_bundle(bundle: GTFSBundle, directory) -> None:
    """Write the bundle canonically (sorted rows, fixed headers, LF endings)."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    b = bundle.sorted()

    def writer(name, header):
        fh = open(directory / name, "w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    fh, w = writer("stops.txt", ["stop_id", "stop_name", "stop_lon", "stop_lat"])
    with fh:
        for s in b.stops:
            w.writerow([s.stop_id, s.name, repr(s.lon), repr(s.lat)])

    fh, w = writer("routes.txt", ["route_id", "route_short_name", "route_long_name", "route_type"])
    with fh:
        for r in b.routes:
            w.writerow([r.route_id, r.short_name, r.long_name, r.route_type])

    fh, w = writer("trips.txt", ["route_id", "service_id", "trip_id"])
    with fh:
        for t in b.trips:
            w.writerow([t.route_id, t.service_id, t.trip_id])

    fh, w = writer(
        "stop_times.txt",
        ["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"],
    )
    with fh:
        for st in b.stop_times:
            w.writerow(
                [
                    st.trip_id,
                    format_gtfs_time(st.arrival_s),
                    format_gtfs_time(st.departure_s),
                    st.stop_id,
                    st.sequence,
                ]
            )

    fh, w = writer(
        "calendar.txt",
        ["service_id", *_DAY_COLUMNS, "start_date", "end_date"],
    )
    with fh:
        for c in b.calendar:
            w.writerow([c.service_id, *c.days, c.start_date, c.end_date])
