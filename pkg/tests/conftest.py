"""Shared synthetic scenario for pipeline-level tests.

The scenario is a rectangular study box with 1 km hexagons and a single
two-stop PT line crossing it:

* HUB sits 60 m beyond the west corner of an interior hexagon, which puts
  it more than the maximum walking distance (865 m at the default walk
  model) from every centroid, so nobody reaches the line on foot there;
* SFAR sits exactly on a centroid far to the east, so its own cell has
  walk-free access to the line;
* trains shuttle HUB<->SFAR every 120 s all day (600 s ride);
* feeder trips (half access, half egress) cluster within 2.4 km of the
  HUB with waits around 300 s and ride times of half a second per meter;
* opportunities (100 per cell) exist only outside the feeder disc.

Consequences used by the assertions: in the baseline only SFAR's cell can
use PT at all and every feeder-area cell is transit-isolated; the virtual
lines connect exactly the feeder cells to the line, so those cells gain
the SFAR cell's opportunities and every other cell's score is unchanged.
"""

import csv
import math

import numpy as np
import pytest

from sms_access.geometry import Bounds, LocalProjection, Point, distance, tessellate

GEN_PROJECTION = LocalProjection(lon0=0.0, lat0=0.0)

HEX_SIDE = 1000.0
FEEDER_OBS_RADIUS = 2400.0
OPPORTUNITY_FREE_RADIUS = 2500.0
RIDE_SECONDS = 600
TRAIN_HEADWAY = 120


def _lonlat(x, y):
    return GEN_PROJECTION.to_lonlat(Point(x, y))


def scenario_grid(box_w=10_000.0, box_h=10_000.0):
    """The same tessellation the pipeline will derive (up to micrometers)."""
    return tessellate(Bounds(0.0, 0.0, box_w, box_h), HEX_SIDE)


def place_stops(grid, box_w, box_h):
    """HUB just past the west corner of a west-side interior cell, SFAR on
    an east-side centroid of the same grid."""

    def nearest_center(target):
        return min(grid.cells, key=lambda c: (distance(c.center, target), c.id)).center

    anchor = nearest_center(Point(0.30 * box_w, 0.50 * box_h))
    hub = Point(anchor.x - HEX_SIDE - 60.0, anchor.y)
    sfar = nearest_center(Point(0.80 * box_w, 0.50 * box_h))
    assert hub.x > 0, "hub fell outside the study box"
    # No centroid may be walkable from the hub (max walk reach is ~865 m).
    nearest = min(distance(c.center, hub) for c in grid.cells)
    assert nearest > 900.0, nearest
    return hub, sfar


def expected_feeder_cells(grid, hub, radius=FEEDER_OBS_RADIUS):
    return {c.id for c in grid.cells if distance(c.center, hub) <= radius}


def write_scenario(root, n_obs=500, seed=0, wait_mean=300.0, ride_per_meter=0.5, box_w=10_000.0, box_h=10_000.0):
    """Write observations, base GTFS and opportunities under ``root``.

    Returns a dict with the input paths, the config path, and the scenario
    geometry (hub location, expected feeder cell ids).
    """
    from sms_access.gtfs import CalendarEntry, GTFSBundle, Route, Stop, StopTime, Trip, write_bundle

    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    grid = scenario_grid(box_w, box_h)
    hub, sfar = place_stops(grid, box_w, box_h)

    # --- base GTFS: one line, two stops, trains every TRAIN_HEADWAY s
    bundle = GTFSBundle()
    bundle.stops = [
        Stop("HUB", "hub stop", *_lonlat(hub.x, hub.y)),
        Stop("SFAR", "far stop", *_lonlat(sfar.x, sfar.y)),
    ]
    bundle.routes = [Route("LINE1", "1", "crossing line", 3)]
    bundle.calendar = [CalendarEntry("ALL", (1,) * 7, "20240101", "20301231")]
    for k, dep in enumerate(range(4 * 3600, 24 * 3600 - RIDE_SECONDS - 1, TRAIN_HEADWAY)):
        east = f"e{k:05d}"
        west = f"w{k:05d}"
        bundle.trips += [Trip("LINE1", "ALL", east), Trip("LINE1", "ALL", west)]
        bundle.stop_times += [
            StopTime(east, dep, dep, "HUB", 1),
            StopTime(east, dep + RIDE_SECONDS, dep + RIDE_SECONDS, "SFAR", 2),
            StopTime(west, dep, dep, "SFAR", 1),
            StopTime(west, dep + RIDE_SECONDS, dep + RIDE_SECONDS, "HUB", 2),
        ]
    gtfs_dir = root / "gtfs_base"
    write_bundle(bundle, gtfs_dir)

    # --- observations: uniform in the feeder disc, clipped to the box
    obs_path = root / "observations.csv"
    with open(obs_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["request_time_s", "origin_lon", "origin_lat", "dest_lon", "dest_lat", "hub_id", "wait_s", "in_vehicle_s"]
        )
        hub_lon, hub_lat = _lonlat(hub.x, hub.y)
        for i in range(n_obs):
            while True:
                r = FEEDER_OBS_RADIUS * math.sqrt(rng.uniform())
                phi = rng.uniform(0, 2 * math.pi)
                x = hub.x + r * math.cos(phi)
                y = hub.y + r * math.sin(phi)
                if 0 <= x <= box_w and 0 <= y <= box_h:
                    break
            t = int(rng.integers(5 * 3600, 23 * 3600))
            wait = float(np.clip(rng.normal(wait_mean, 30.0), 200.0, 400.0))
            ride = max(30.0, ride_per_meter * math.hypot(x - hub.x, y - hub.y) + rng.normal(0, 20.0))
            user_lon, user_lat = _lonlat(x, y)
            if i % 2 == 0:  # access: user -> hub
                row = [t, user_lon, user_lat, hub_lon, hub_lat, "HUB", round(wait, 3), round(ride, 3)]
            else:  # egress: hub -> user
                row = [t, hub_lon, hub_lat, user_lon, user_lat, "HUB", round(wait, 3), round(ride, 3)]
            w.writerow(row)

    # --- opportunities: 100 residents per cell outside the feeder disc
    opp_path = root / "opportunities.csv"
    with open(opp_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "count"])
        for cell in grid.cells:
            count = 0.0 if distance(cell.center, hub) <= OPPORTUNITY_FREE_RADIUS else 100.0
            lon, lat = _lonlat(cell.center.x, cell.center.y)
            w.writerow([lon, lat, count])

    lon_min, lat_min = _lonlat(0.0, 0.0)
    lon_max, lat_max = _lonlat(box_w, box_h)
    config_path = root / "run.cfg"
    config_path.write_text(
        "\n".join(
            [
                "observations = observations.csv",
                "gtfs_dir = gtfs_base",
                "opportunities = opportunities.csv",
                f"out_dir = {root / 'out'}",
                f"bounds_lonlat = {lon_min},{lat_min},{lon_max},{lat_max}",
                f"hex_side = {HEX_SIDE}",
                "tau = 3600",
                "slot_length = 3600",
                "day_window = 05:00-23:00",
                "rng_seed = 0",
                "workers = 1",
                "",
            ]
        )
    )
    return {
        "root": root,
        "config": config_path,
        "observations": obs_path,
        "gtfs_dir": gtfs_dir,
        "opportunities": opp_path,
        "out_dir": root / "out",
        "grid": grid,
        "hub": hub,
        "sfar": sfar,
        "feeder_cells": expected_feeder_cells(grid, hub),
    }


@pytest.fixture
def scenario(tmp_path):
    return write_scenario(tmp_path / "scenario")
