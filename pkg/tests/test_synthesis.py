import math

import numpy as np
import pytest

from sms_access.geometry import Point
from sms_access.geostat import EstimateSurface
from sms_access.gtfs import (
    CalendarEntry,
    GTFSBundle,
    Route,
    Stop,
    StopIdCollisionError,
    StopTime,
    Trip,
    format_gtfs_time,
    parse_gtfs_time,
    read_bundle,
    write_bundle,
)
from sms_access.observations import Direction
from sms_access.synthesis import (
    VirtualLine,
    VirtualTrip,
    extract_virtual_lines,
    merge_virtual_lines,
    synthesize_line,
    synthesize_type2_trip,
    write_gtfs,
)

CID = 5
HUB = "H1"


def make_surfaces(wait_by_slot, travel_by_slot=None, cid=CID, direction=Direction.ACCESS, slot_length=3600):
    travel_by_slot = travel_by_slot or {}
    return {
        slot: EstimateSurface(
            hub_id=HUB,
            direction=direction,
            slot_start=slot,
            slot_length=slot_length,
            wait_estimate={cid: w},
            travel_estimate={cid: travel_by_slot.get(slot, 300.0)},
            support={cid: 9},
        )
        for slot, w in wait_by_slot.items()
    }


def round_half_up(x):
    return int(math.floor(x + 0.5))


def step_simulation_oracle(wait_by_slot, anchor, window, slot_length=3600, floor=30):
    """Replays the departure recurrences by literal one-second stepping."""

    def headway(t):
        w = max(floor, round_half_up(wait_by_slot[(t // slot_length) * slot_length]))
        return 2 * w

    start, end = window
    deps = [anchor]
    t = anchor
    while True:
        target = headway(t)
        nxt = t
        for _ in range(target):
            nxt += 1
        if nxt >= end:
            break
        deps.append(nxt)
        t = nxt
    t = anchor
    while True:
        target = headway(t)
        prv = t
        for _ in range(target):
            prv -= 1
        if prv < start:
            break
        deps.append(prv)
        t = prv
    return sorted(deps)


class TestSynthesizeLine:
    def test_constant_wait_spaces_departures_at_twice_wait(self):
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)})
        line = synthesize_line(CID, HUB, Direction.ACCESS, surfaces, anchor=43200, day_window=(0, 86400))
        deps = [t.depart for t in line.trips]
        assert all(b - a == 600 for a, b in zip(deps, deps[1:]))
        assert min(deps) <= 0 + 600
        assert max(deps) >= 86400 - 600 - 300  # last trip also fits before midnight
        assert all(t.origin_stop == "VC_5" and t.destination_stop == HUB for t in line.trips)

    def test_step_change_uses_previous_departures_slot(self):
        # Wait 300 s before 08:00, 600 s after: the jump to 1200 s spacing
        # happens only once a departure falls inside the 08:00 slot.
        waits = {s: (300.0 if s < 28800 else 600.0) for s in range(18000, 36000, 3600)}
        line = synthesize_line(CID, HUB, Direction.ACCESS, make_surfaces(waits), anchor=25200, day_window=(18000, 36000))
        deps = [t.depart for t in line.trips]
        after_anchor = [d for d in deps if d >= 25200]
        assert after_anchor[:8] == [25200, 25800, 26400, 27000, 27600, 28200, 28800, 30000]
        assert deps == step_simulation_oracle(waits, 25200, (18000, 36000))

    def test_random_piecewise_surfaces_match_step_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            waits = {s: float(rng.uniform(40, 1200)) for s in range(0, 86400, 3600)}
            anchor = int(rng.integers(18000, 82800))
            line = synthesize_line(CID, HUB, Direction.ACCESS, make_surfaces(waits), anchor=anchor, day_window=(18000, 82800))
            expected = step_simulation_oracle(waits, anchor, (18000, 82800))
            # trips past midnight are never generated inside this window
            assert [t.depart for t in line.trips] == expected

    def test_headway_law_exact(self):
        rng = np.random.default_rng(22)
        waits = {s: float(rng.uniform(40, 900)) for s in range(0, 86400, 3600)}
        anchor = 50000
        line = synthesize_line(CID, HUB, Direction.ACCESS, make_surfaces(waits), anchor=anchor, day_window=(18000, 82800))
        deps = [t.depart for t in line.trips]

        def w_int(t):
            return max(30, round_half_up(waits[(t // 3600) * 3600]))

        for a, b in zip(deps, deps[1:]):
            if a >= anchor:
                assert b - a == 2 * w_int(a)
            else:
                assert b - a == 2 * w_int(b)

    def test_arrivals_use_departure_slot_travel_estimate(self):
        waits = {s: 450.0 for s in range(0, 86400, 3600)}
        travels = {s: 200.0 + s / 3600 for s in range(0, 86400, 3600)}
        line = synthesize_line(CID, HUB, Direction.ACCESS, make_surfaces(waits, travels), anchor=43200, day_window=(0, 86400))
        for t in line.trips:
            slot = (t.depart // 3600) * 3600
            assert t.arrive == t.depart + round_half_up(travels[slot])

    def test_egress_runs_hub_to_centroid(self):
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)}, direction=Direction.EGRESS)
        line = synthesize_line(CID, HUB, Direction.EGRESS, surfaces, anchor=43200, day_window=(0, 86400))
        assert all(t.origin_stop == HUB and t.destination_stop == "VC_5" for t in line.trips)

    def test_tiny_wait_hits_floor_and_is_flagged(self):
        surfaces = make_surfaces({s: 2.0 for s in range(0, 86400, 3600)})
        line = synthesize_line(CID, HUB, Direction.ACCESS, surfaces, anchor=43200, day_window=(43200, 46800))
        deps = [t.depart for t in line.trips]
        assert all(b - a == 60 for a, b in zip(deps, deps[1:]))
        assert "wait_floored" in line.flags

    def test_missing_slot_estimate_means_no_line(self):
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)})
        del surfaces[36000]
        assert synthesize_line(CID, HUB, Direction.ACCESS, surfaces, anchor=43200, day_window=(0, 86400)) is None

    def test_anchor_outside_window_rejected(self):
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)})
        with pytest.raises(ValueError):
            synthesize_line(CID, HUB, Direction.ACCESS, surfaces, anchor=1000, day_window=(18000, 82800))

    def test_window_edges_covered_within_one_headway(self):
        # No gap larger than one headway at either end of the window.
        rng = np.random.default_rng(25)
        window = (18000, 82800)
        for _ in range(20):
            waits = {s: float(rng.uniform(40, 1100)) for s in range(0, 86400, 3600)}
            anchor = int(rng.integers(*window))
            line = synthesize_line(CID, HUB, Direction.ACCESS, make_surfaces(waits), anchor=anchor, day_window=window)
            deps = [t.depart for t in line.trips]
            h_max = 2 * max(max(30, round_half_up(w)) for w in waits.values())
            assert min(deps) <= window[0] + h_max
            assert max(deps) >= window[1] - h_max


class TestType2:
    def test_additive_arrival(self):
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)}, {s: 420.0 for s in range(0, 86400, 3600)})
        trip = synthesize_type2_trip(CID, HUB, Direction.ACCESS, 32400, surfaces)
        assert (trip.depart, trip.arrive) == (32400, 32820)

    def test_slot_boundary_uses_half_open_convention(self):
        travels = {s: (100.0 if s < 36000 else 700.0) for s in range(0, 86400, 3600)}
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)}, travels)
        trip = synthesize_type2_trip(CID, HUB, Direction.ACCESS, 36000, surfaces)
        assert trip.arrive == 36000 + 700

    def test_random_queries_match_slot_lookup(self):
        rng = np.random.default_rng(23)
        travels = {s: float(rng.uniform(60, 1800)) for s in range(0, 86400, 3600)}
        surfaces = make_surfaces({s: 300.0 for s in range(0, 86400, 3600)}, travels)
        for _ in range(50):
            q = int(rng.integers(0, 80000))
            trip = synthesize_type2_trip(CID, HUB, Direction.ACCESS, q, surfaces)
            assert trip.arrive == q + max(1, round_half_up(travels[(q // 3600) * 3600]))

    def test_unestimable_gives_no_trip(self):
        surfaces = make_surfaces({0: 300.0})
        assert synthesize_type2_trip(99, HUB, Direction.ACCESS, 1800, surfaces) is None


def base_bundle():
    return GTFSBundle(
        stops=[Stop("H1", "hub one", 2.01, 48.6), Stop("S2", "other", 2.05, 48.62)],
        routes=[Route("R1", "1", "line one", 3)],
        trips=[Trip("R1", "WK", "R1_a")],
        stop_times=[
            StopTime("R1_a", 36000, 36000, "H1", 1),
            StopTime("R1_a", 36600, 36600, "S2", 2),
        ],
        calendar=[CalendarEntry("WK", (1, 1, 1, 1, 1, 0, 0), "20240101", "20241231")],
    )


CENTROID_POINTS = {5: Point(200.0, 300.0), 7: Point(-500.0, 800.0)}


class TestGtfsFiles:
    def test_time_parsing_round_trip(self):
        assert parse_gtfs_time("08:05:30") == 29130
        assert format_gtfs_time(29130) == "08:05:30"
        assert parse_gtfs_time("25:01:02") == 90062  # past-midnight base input
        assert format_gtfs_time(90062) == "25:01:02"

    def test_write_read_write_is_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        write_bundle(base_bundle(), d1)
        write_bundle(read_bundle(d1), d2)
        for name in ("stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar.txt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()


class TestWriteGtfs:
    def test_empty_lines_keep_base_unchanged(self, tmp_path):
        base = base_bundle()
        out = tmp_path / "merged"
        merged = write_gtfs(base, [], out, CENTROID_POINTS)
        ref = tmp_path / "ref"
        write_bundle(base, ref)
        for name in ("stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar.txt"):
            assert (out / name).read_bytes() == (ref / name).read_bytes()
        assert merged.sorted().trips == base.sorted().trips

    def test_three_trips_add_six_stop_time_rows(self, tmp_path):
        line = VirtualLine(
            5,
            "H1",
            Direction.ACCESS,
            tuple(
                VirtualTrip("VC_5", "H1", d, d + 200, Direction.ACCESS)
                for d in (30000, 30600, 31200)
            ),
        )
        base = base_bundle()
        merged = merge_virtual_lines(base, [line], CENTROID_POINTS)
        assert len(merged.stop_times) == len(base.stop_times) + 6
        assert len(merged.routes) == len(base.routes) + 1
        assert "VC_5" in merged.stop_ids()

    def test_round_trip_reconstructs_virtual_trips(self, tmp_path):
        rng = np.random.default_rng(24)
        lines = []
        for cid, direction in ((5, Direction.ACCESS), (7, Direction.EGRESS)):
            deps = sorted(int(d) for d in rng.integers(20000, 80000, size=6))
            trips = []
            for d in deps:
                if direction is Direction.ACCESS:
                    trips.append(VirtualTrip(f"VC_{cid}", "H1", d, d + 240, direction))
                else:
                    trips.append(VirtualTrip("H1", f"VC_{cid}", d, d + 240, direction))
            lines.append(VirtualLine(cid, "H1", direction, tuple(trips)))
        out = tmp_path / "merged"
        write_gtfs(base_bundle(), lines, out, CENTROID_POINTS)
        parsed = extract_virtual_lines(read_bundle(out))
        assert {(l.centroid_id, l.direction): l.trips for l in parsed} == {
            (l.centroid_id, l.direction): l.trips for l in lines
        }

    def test_stop_id_collision_is_fatal(self):
        base = base_bundle()
        base.stops.append(Stop("VC_5", "collides", 0.0, 0.0))
        line = VirtualLine(5, "H1", Direction.ACCESS, (VirtualTrip("VC_5", "H1", 100, 200, Direction.ACCESS),))
        with pytest.raises(StopIdCollisionError, match="VC_5"):
            merge_virtual_lines(base, [line], CENTROID_POINTS)

    def test_unknown_hub_stop_is_fatal(self):
        line = VirtualLine(5, "NOPE", Direction.ACCESS, (VirtualTrip("VC_5", "NOPE", 100, 200, Direction.ACCESS),))
        with pytest.raises(ValueError, match="NOPE"):
            merge_virtual_lines(base_bundle(), [line], CENTROID_POINTS)

    def test_base_route_resembling_virtual_id_is_left_alone(self, tmp_path):
        base = base_bundle()
        base.routes.append(Route("VL_weird", "w", "not ours", 3))
        base.trips.append(Trip("VL_weird", "WK", "VLW_1"))
        base.stop_times += [
            StopTime("VLW_1", 100, 100, "H1", 1),
            StopTime("VLW_1", 200, 200, "S2", 2),
        ]
        line = VirtualLine(5, "H1", Direction.ACCESS, (VirtualTrip("VC_5", "H1", 100, 200, Direction.ACCESS),))
        merged = merge_virtual_lines(base, [line], CENTROID_POINTS)
        parsed = extract_virtual_lines(merged)
        assert [l.centroid_id for l in parsed] == [5]
