"""From estimated waits to a virtual timetable.

A feeder service with a 240 s expected wait in the morning and 420 s in the
afternoon becomes a schedule whose departures are spaced by twice the wait
of the slot at hand: a rider who shows up at random waits, on average,
exactly the estimated wait. The result is written as a GTFS bundle next to
a tiny conventional line.
"""

import tempfile
from pathlib import Path

from sms_access.geometry import Point
from sms_access.geostat import EstimateSurface
from sms_access.gtfs import CalendarEntry, GTFSBundle, Route, Stop, StopTime, Trip
from sms_access.observations import Direction
from sms_access.synthesis import synthesize_line, write_gtfs

CENTROID, HUB = 3, "HUB"

surfaces = {}
for slot in range(0, 86400, 3600):
    wait = 240.0 if slot < 43200 else 420.0
    surfaces[slot] = EstimateSurface(
        hub_id=HUB,
        direction=Direction.ACCESS,
        slot_start=slot,
        slot_length=3600,
        wait_estimate={CENTROID: wait},
        travel_estimate={CENTROID: 360.0},
        support={CENTROID: 12},
    )

line = synthesize_line(
    CENTROID, HUB, Direction.ACCESS, surfaces, anchor=43200, day_window=(6 * 3600, 22 * 3600)
)
print(f"virtual line {line.route_id}: {len(line.trips)} trips")
print("first departures around the midday wait change:")
for trip in line.trips:
    if 41000 <= trip.depart <= 46000:
        h, m, s = trip.depart // 3600, trip.depart % 3600 // 60, trip.depart % 60
        print(f"  {h:02d}:{m:02d}:{s:02d} -> arrives {trip.arrive - trip.depart} s later")

base = GTFSBundle(
    stops=[Stop(HUB, "hub", 2.2, 48.7), Stop("TERM", "terminus", 2.3, 48.75)],
    routes=[Route("L1", "1", "main line", 3)],
    trips=[Trip("L1", "ALL", "L1_0800")],
    stop_times=[
        StopTime("L1_0800", 28800, 28800, HUB, 1),
        StopTime("L1_0800", 30000, 30000, "TERM", 2),
    ],
    calendar=[CalendarEntry("ALL", (1,) * 7, "20240101", "20301231")],
)

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "gtfs_merged"
    merged = write_gtfs(base, [line], out, {CENTROID: Point(1200.0, -400.0)})
    print(f"\nwrote {out.name}/: {len(merged.trips)} trips, {len(merged.stop_times)} stoptimes")
    print((out / "routes.txt").read_text(), end="")
