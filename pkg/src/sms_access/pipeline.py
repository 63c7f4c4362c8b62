"""End-to-end pipeline: configuration, staged execution with artifact
caching, and the run manifest.

Stages (each also exposed as a CLI subcommand) and their artifacts, all
under the configured output directory:

1. tessellate  -> grid.geojson
2. estimate    -> surfaces.csv, feeder.csv (+ variograms.csv when enabled)
3. synthesize  -> gtfs_merged/ (stops, routes, trips, stop_times, calendar)
4. route       -> matrix_baseline.csv, matrix_merged.csv
5. score       -> scores.csv (feeder scenario), scores_baseline.csv
6. compare     -> improvement.csv, improvement.geojson

Each stage records a hash of the configuration fields it depends on
(including input-file content digests); a re-run with a matching hash loads
the artifact instead of recomputing. Running stages one by one therefore
produces byte-identical outputs to a single `run`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import accessibility as acc
from . import geostat, gtfs, router, synthesis
from .geometry import Bounds, HexGrid, LocalProjection, dump_geojson, grid_geojson, load_opportunities, tessellate
from .observations import Direction, Hub, bucket, derive_feeder_area, ingest

log = logging.getLogger(__name__)

DAY_SECONDS = 86400
STAGES = ("tessellate", "estimate", "synthesize", "route", "score", "compare")


def parse_time_literal(text: str) -> int:
    """Accept plain seconds or HH:MM[:SS]."""
    text = text.strip()
    if ":" in text:
        parts = [int(p) for p in text.split(":")]
        while len(parts) < 3:
            parts.append(0)
        h, m, s = parts
        return h * 3600 + m * 60 + s
    return int(text)


@dataclass
class RunConfig:
    """Everything a run needs. Defaults: 1 km cells, one-hour time budget
    and timeslots, 15 min walk cap, 100 m variogram lag, 3000 m range."""

    observations: str
    gtfs_dir: str
    opportunities: str
    out_dir: str
    bounds_lonlat: tuple[float, float, float, float] | None = None
    hex_side: float = 1000.0
    tau: float = 3600.0
    slot_length: int = 3600
    lag_increment: float = 100.0
    variogram_range: float = 3000.0
    walk_speed: float = 1.25
    walk_detour: float = 1.3
    max_walk: float = 900.0
    walk_overrides: str | None = None
    system_type: int = 1
    rng_seed: int = 0
    day_window: tuple[int, int] = (5 * 3600, 23 * 3600)
    departure_samples: tuple[int, ...] = ()
    hub_tolerance: float = 100.0
    min_samples: int = 5
    wait_floor: int = 30
    max_feeder_radius: float | None = None
    score_mode: str = "opportunities"
    dump_variograms: bool = False
    workers: int = 0

    def validate(self) -> None:
        positive = {
            "hex_side": self.hex_side,
            "tau": self.tau,
            "slot_length": self.slot_length,
            "lag_increment": self.lag_increment,
            "variogram_range": self.variogram_range,
            "walk_speed": self.walk_speed,
            "max_walk": self.max_walk,
            "wait_floor": self.wait_floor,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.walk_detour < 1.0:
            raise ValueError("walk_detour must be >= 1")
        if self.system_type not in (1, 2):
            raise ValueError("system_type must be 1 or 2")
        if self.score_mode not in ("opportunities", "diversity"):
            raise ValueError("score_mode must be 'opportunities' or 'diversity'")
        start, end = self.day_window
        if not 0 <= start < end <= DAY_SECONDS:
            raise ValueError(f"day window {self.day_window} is not well-ordered")
        if DAY_SECONDS % self.slot_length:
            raise ValueError("slot_length must divide 86400")
        for path in (self.observations, self.gtfs_dir, self.opportunities):
            if not Path(path).exists():
                raise FileNotFoundError(path)

    def samples(self) -> tuple[int, ...]:
        """Departure times scored; default hourly on the hour in the window."""
        if self.departure_samples:
            return self.departure_samples
        start, end = self.day_window
        first = int(math.ceil(start / 3600)) * 3600
        return tuple(range(first, end, 3600))

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


_CONFIG_KEYS = {
    "observations": str,
    "gtfs_dir": str,
    "opportunities": str,
    "out_dir": str,
    "bounds_lonlat": "bounds",
    "hex_side": float,
    "tau": float,
    "slot_length": int,
    "lag_increment": float,
    "variogram_range": float,
    "walk_speed": float,
    "walk_detour": float,
    "max_walk": float,
    "walk_overrides": str,
    "system_type": int,
    "rng_seed": int,
    "day_window": "window",
    "departure_samples": "samples",
    "hub_tolerance": float,
    "min_samples": int,
    "wait_floor": int,
    "max_feeder_radius": float,
    "score_mode": str,
    "dump_variograms": "bool",
    "workers": int,
}

_PATH_KEYS = ("observations", "gtfs_dir", "opportunities", "out_dir", "walk_overrides")


def _coerce(key: str, raw: str):
    kind = _CONFIG_KEYS[key]
    raw = raw.strip()
    if kind is str:
        return raw
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    if kind == "bounds":
        vals = [float(v) for v in raw.split(",")]
        if len(vals) != 4:
            raise ValueError(f"bounds_lonlat needs 4 numbers, got {raw!r}")
        return tuple(vals)
    if kind == "window":
        lo, hi = raw.split("-")
        return (parse_time_literal(lo), parse_time_literal(hi))
    if kind == "samples":
        if raw.lower() == "hourly":
            return ()
        return tuple(parse_time_literal(v) for v in raw.split(","))
    raise AssertionError(kind)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a `key = value` config file; CLI overrides win. Relative paths
    resolve against the config file's directory."""
    path = Path(path)
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_KEYS:
                raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    for key in _PATH_KEYS:
        if values.get(key):
            p = Path(values[key])
            if not p.is_absolute():
                values[key] = str((path.parent / p).resolve())
    missing = {"observations", "gtfs_dir", "opportunities", "out_dir"} - set(values)
    if missing:
        raise ValueError(f"config missing required keys: {sorted(missing)}")
    return RunConfig(**values)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_digests(cfg: RunConfig) -> dict:
    digests = {"observations": _file_digest(cfg.observations), "opportunities": _file_digest(cfg.opportunities)}
    gtfs_dir = Path(cfg.gtfs_dir)
    digests["gtfs"] = {p.name: _file_digest(p) for p in sorted(gtfs_dir.glob("*.txt"))}
    if cfg.walk_overrides:
        digests["walk_overrides"] = _file_digest(cfg.walk_overrides)
    return digests


# Config fields each stage depends on (cumulative).
_STAGE_FIELDS = {
    "tessellate": ("bounds_lonlat", "hex_side"),
    "estimate": ("slot_length", "lag_increment", "variogram_range", "hub_tolerance", "min_samples", "max_feeder_radius"),
    "synthesize": ("rng_seed", "day_window", "wait_floor", "system_type", "departure_samples"),
    "route": ("walk_speed", "walk_detour", "max_walk", "walk_overrides"),
    "score": ("tau", "score_mode"),
    "compare": (),
}


def stage_hash(cfg: RunConfig, stage: str, digests: dict) -> str:
    payload: dict = {"inputs": digests}
    for s in STAGES[: STAGES.index(stage) + 1]:
        for name in _STAGE_FIELDS[s]:
            payload[name] = getattr(cfg, name)
        if s in ("route", "score"):
            payload["departure_samples"] = cfg.samples()
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_hash(cfg: RunConfig) -> str:
    """Hash over every semantically relevant field (not workers/out_dir)."""
    payload = {
        f.name: getattr(cfg, f.name)
        for f in fields(cfg)
        if f.name not in ("workers", "out_dir")
    }
    payload["departure_samples"] = cfg.samples()
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class StageRecord:
    name: str
    seconds: float
    cached: bool
    records: dict


@dataclass
class RunManifest:
    config_hash: str
    stages: list[StageRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    status: str = "ok"
    failed_stage: str | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "status": self.status,
            "failed_stage": self.failed_stage,
            "warnings": self.warnings,
            "stages": [
                {"name": s.name, "seconds": round(s.seconds, 6), "cached": s.cached, "records": s.records}
                for s in self.stages
            ],
        }


def _line_anchor(seed: int, hub_id: str, direction: Direction, centroid_id: int, window: tuple[int, int]) -> int:
    """Deterministic per-line anchor drawn uniformly in the day window,
    independent of line enumeration order."""
    digest = hashlib.sha256(f"{hub_id}|{direction.value}|{centroid_id}".encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]
    rng = np.random.default_rng([seed & 0xFFFFFFFF, *words])
    start, end = window
    return start + int(rng.integers(0, end - start))


class PipelineRun:
    """Executes stages with caching; keeps intermediate objects in memory."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.digests = _input_digests(cfg)
        self.manifest = RunManifest(config_hash=config_hash(cfg))
        self.projection: LocalProjection | None = None
        self.grid: HexGrid | None = None
        self.categories: dict[int, set[str]] = {}
        self.base_bundle: gtfs.GTFSBundle | None = None
        self.hubs: list[Hub] = []
        self.surfaces: dict[tuple[str, str], dict[int, geostat.EstimateSurface]] = {}
        self.feeder: dict[str, set[int]] = {}
        self.merged_bundle: gtfs.GTFSBundle | None = None
        self.matrix_baseline: router.TravelTimeMatrix | None = None
        self.matrix_merged: router.TravelTimeMatrix | None = None
        self.scores_baseline: list[acc.AccessibilityScore] = []
        self.scores_merged: list[acc.AccessibilityScore] = []
        self.records: list[acc.ImprovementRecord] = []

    # -- cache bookkeeping ------------------------------------------------

    def _marker(self, stage: str) -> Path:
        return self.out / f"stage_{stage}.json"

    def _cache_valid(self, stage: str, artifacts: list[Path]) -> bool:
        marker = self._marker(stage)
        if not marker.exists() or not all(p.exists() for p in artifacts):
            return False
        try:
            stored = json.loads(marker.read_text())
        except json.JSONDecodeError:
            return False
        return stored.get("hash") == stage_hash(self.cfg, stage, self.digests)

    def _write_marker(self, stage: str) -> None:
        self._marker(stage).write_text(
            json.dumps({"hash": stage_hash(self.cfg, stage, self.digests)}) + "\n"
        )

    def _record(self, name: str, t0: float, cached: bool, **records) -> None:
        self.manifest.stages.append(
            StageRecord(name=name, seconds=time.perf_counter() - t0, cached=cached, records=records)
        )

    def _warn(self, message: str) -> None:
        log.warning(message)
        self.manifest.warnings.append(message)

    # -- shared cheap setup ------------------------------------------------

    def _ensure_base(self) -> None:
        if self.base_bundle is None:
            self.base_bundle = gtfs.read_bundle(self.cfg.gtfs_dir)

    def _derive_bounds(self) -> tuple[Bounds, LocalProjection]:
        self._ensure_base()
        if self.cfg.bounds_lonlat:
            lon_min, lat_min, lon_max, lat_max = self.cfg.bounds_lonlat
        else:
            lons, lats = [], []
            for s in self.base_bundle.stops:
                lons.append(s.lon)
                lats.append(s.lat)
            with open(self.cfg.observations, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    lons += [float(rec["origin_lon"]), float(rec["dest_lon"])]
                    lats += [float(rec["origin_lat"]), float(rec["dest_lat"])]
            with open(self.cfg.opportunities, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    lons.append(float(rec["lon"]))
                    lats.append(float(rec["lat"]))
            if not lons:
                raise ValueError("cannot derive bounds: no coordinates in inputs")
            lon_min, lon_max = min(lons), max(lons)
            lat_min, lat_max = min(lats), max(lats)
        projection = LocalProjection(lon0=0.5 * (lon_min + lon_max), lat0=0.5 * (lat_min + lat_max))
        lo = projection.to_planar(lon_min, lat_min)
        hi = projection.to_planar(lon_max, lat_max)
        pad = 0.0 if self.cfg.bounds_lonlat else self.cfg.hex_side
        bounds = Bounds(lo.x - pad, lo.y - pad, hi.x + pad, hi.y + pad)
        return bounds, projection

    # -- stages -----------------------------------------------------------

    def stage_tessellate(self) -> None:
        t0 = time.perf_counter()
        bounds, self.projection = self._derive_bounds()
        self.grid = tessellate(bounds, self.cfg.hex_side)
        self.categories, skipped = load_opportunities(self.cfg.opportunities, self.grid, self.projection)
        if skipped:
            self._warn(f"{skipped} opportunity rows outside the grid")
        dump_geojson(grid_geojson(self.grid, self.projection), self.out / "grid.geojson")
        self._write_marker("tessellate")
        self._record(
            "tessellate",
            t0,
            cached=False,
            cells=len(self.grid),
            opportunities=self.grid.total_opportunities(),
            skipped_opportunity_rows=skipped,
        )

    def stage_estimate(self) -> None:
        artifacts = [self.out / "surfaces.csv", self.out / "feeder.csv"]
        cached = self._cache_valid("estimate", artifacts)
        t0 = time.perf_counter()
        if cached:
            self.surfaces = _read_surfaces_csv(artifacts[0])
            self.feeder = _read_feeder_csv(artifacts[1])
            self._record("estimate", t0, cached=True, surfaces=sum(len(v) for v in self.surfaces.values()))
            return
        self._ensure_base()
        stop_points = {
            s.stop_id: self.projection.to_planar(s.lon, s.lat) for s in self.base_bundle.stops
        }
        with open(self.cfg.observations, newline="", encoding="utf-8") as fh:
            hub_ids = sorted({rec["hub_id"].strip() for rec in csv.DictReader(fh) if rec.get("hub_id")})
        unknown = [h for h in hub_ids if h not in stop_points]
        if unknown:
            self._warn(f"hub ids missing from base GTFS stops: {unknown} (their rows are rejected)")
        self.hubs = [Hub(id=h, location=stop_points[h]) for h in hub_ids if h in stop_points]

        result = ingest(
            self.cfg.observations, self.hubs, projection=self.projection, tolerance=self.cfg.hub_tolerance
        )
        if result.rejected:
            self._warn(f"{len(result.rejected)} observation rows rejected")

        by_hub: dict[str, list] = {}
        for o in result.observations:
            by_hub.setdefault(o.hub_id, []).append(o)
        self.feeder = {}
        for hub in self.hubs:
            cells = derive_feeder_area(
                hub, by_hub.get(hub.id, []), self.grid, max_radius=self.cfg.max_feeder_radius
            )
            if not cells:
                self._warn(f"hub {hub.id} has an empty feeder area")
            self.feeder[hub.id] = cells

        datasets = bucket(result.observations, self.cfg.slot_length)
        self.surfaces = {}
        fallbacks = 0
        for ds in datasets:
            cells = self.feeder.get(ds.hub_id, set())
            if not cells:
                continue
            centroids = {cid: self.grid.cell(cid).center for cid in sorted(cells)}
            surface = geostat.estimate_surface(
                ds,
                centroids,
                lag_increment=self.cfg.lag_increment,
                range_m=self.cfg.variogram_range,
                min_samples=self.cfg.min_samples,
            )
            if surface.fallback:
                fallbacks += 1
            self.surfaces.setdefault((ds.hub_id, ds.direction.value), {})[ds.slot_start] = surface

        filled = self._fill_missing_slots(by_hub)
        if fallbacks:
            self._warn(f"{fallbacks} timeslot surfaces used the dataset-mean fallback")
        if filled:
            self._warn(f"{filled} empty timeslots filled with the day-level mean")
        _write_surfaces_csv(artifacts[0], self.surfaces)
        _write_feeder_csv(artifacts[1], self.hubs, self.feeder)
        if self.cfg.dump_variograms:
            _dump_variograms(self.out / "variograms.csv", datasets, self.cfg)
        self._write_marker("estimate")
        self._record(
            "estimate",
            t0,
            cached=False,
            observations=len(result.observations),
            rejected=len(result.rejected),
            hubs=len(self.hubs),
            datasets=len(datasets),
            surfaces=sum(len(v) for v in self.surfaces.values()),
            mean_fallbacks=fallbacks,
            day_fallbacks=filled,
        )

    def _fill_missing_slots(self, by_hub: dict) -> int:
        """Give every (hub, direction) a surface in every window slot.

        The headway recurrence needs an estimate in each slot it crosses; a
        slot with no observations borrows the day-level mean of its (hub,
        direction) dataset, flagged as a fallback."""
        start, end = self.cfg.day_window
        slot_len = self.cfg.slot_length
        first = (start // slot_len) * slot_len
        filled = 0
        for (hub_id, direction), slots in self.surfaces.items():
            cells = sorted(self.feeder.get(hub_id, set()))
            if not cells:
                continue
            day_obs = [
                o for o in by_hub.get(hub_id, []) if o.direction.value == direction
            ]
            if not day_obs:
                continue
            wait_mean = float(np.mean([o.wait for o in day_obs]))
            travel_mean = float(np.mean([o.in_vehicle for o in day_obs]))
            slot = first
            while slot < end:
                if slot not in slots:
                    slots[slot] = geostat.EstimateSurface(
                        hub_id=hub_id,
                        direction=Direction(direction),
                        slot_start=slot,
                        slot_length=slot_len,
                        wait_estimate={cid: wait_mean for cid in cells},
                        travel_estimate={cid: travel_mean for cid in cells},
                        support={cid: len(day_obs) for cid in cells},
                        fallback="day_mean",
                    )
                    filled += 1
                slot += slot_len
        return filled

    def stage_synthesize(self) -> None:
        gtfs_dir = self.out / "gtfs_merged"
        artifacts = [gtfs_dir / name for name in ("stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar.txt")]
        cached = self._cache_valid("synthesize", artifacts)
        t0 = time.perf_counter()
        if cached:
            self.merged_bundle = gtfs.read_bundle(gtfs_dir)
            self._record("synthesize", t0, cached=True, trips=len(self.merged_bundle.trips))
            return
        self._ensure_base()
        lines: list[synthesis.VirtualLine] = []
        floored = 0
        skipped = 0
        for (hub_id, direction), slots in sorted(self.surfaces.items()):
            dir_enum = Direction(direction)
            centroid_ids = sorted({cid for s in slots.values() for cid in s.wait_estimate})
            for cid in centroid_ids:
                if self.cfg.system_type == 1:
                    anchor = _line_anchor(self.cfg.rng_seed, hub_id, dir_enum, cid, self.cfg.day_window)
                    line = synthesis.synthesize_line(
                        cid,
                        hub_id,
                        dir_enum,
                        slots,
                        anchor=anchor,
                        day_window=self.cfg.day_window,
                        wait_floor=self.cfg.wait_floor,
                    )
                else:
                    trips = []
                    for t in self.cfg.samples():
                        vt = synthesis.synthesize_type2_trip(cid, hub_id, dir_enum, t, slots)
                        if vt is not None:
                            trips.append(vt)
                    line = (
                        synthesis.VirtualLine(cid, hub_id, dir_enum, tuple(trips)) if trips else None
                    )
                if line is None:
                    skipped += 1
                    continue
                if "wait_floored" in line.flags:
                    floored += 1
                lines.append(line)
        if skipped:
            self._warn(f"{skipped} centroid lines skipped (unestimable in some slot)")
        if floored:
            self._warn(f"{floored} lines hit the wait floor of {self.cfg.wait_floor}s")
        self.merged_bundle = synthesis.write_gtfs(
            self.base_bundle, lines, gtfs_dir, self.grid.centroids(), self.projection
        )
        self._write_marker("synthesize")
        self._record(
            "synthesize",
            t0,
            cached=False,
            lines=len(lines),
            virtual_trips=sum(len(ln.trips) for ln in lines),
            skipped_lines=skipped,
            floored_lines=floored,
        )

    def stage_route(self) -> None:
        artifacts = [self.out / "matrix_baseline.csv", self.out / "matrix_merged.csv"]
        cached = self._cache_valid("route", artifacts)
        t0 = time.perf_counter()
        if cached:
            self.matrix_baseline = _read_matrix_csv(artifacts[0])
            self.matrix_merged = _read_matrix_csv(artifacts[1])
            self._record("route", t0, cached=True)
            return
        self._ensure_base()
        walk = router.WalkModel(
            speed=self.cfg.walk_speed,
            detour_factor=self.cfg.walk_detour,
            max_walk=self.cfg.max_walk,
            overrides=_read_walk_overrides(self.cfg.walk_overrides),
        )
        samples = self.cfg.samples()
        workers = self.cfg.effective_workers()
        base_graph = router.build_graph(self.base_bundle, walk, self.projection)
        if base_graph.rejected_trips:
            self._warn(f"baseline graph rejected {base_graph.rejected_trips} trips")
        self.matrix_baseline = router.travel_time_matrix(base_graph, self.grid, samples, walk, workers)

        if self.cfg.system_type == 1:
            merged_graph = router.build_graph(self.merged_bundle, walk, self.projection)
            self.matrix_merged = router.travel_time_matrix(merged_graph, self.grid, samples, walk, workers)
        else:
            blocks = []
            for t in samples:
                bundle_t = _bundle_for_sample(self.merged_bundle, t)
                graph_t = router.build_graph(bundle_t, walk, self.projection)
                m = router.travel_time_matrix(graph_t, self.grid, [t], walk, workers)
                blocks.append(m.seconds[0])
            self.matrix_merged = router.TravelTimeMatrix(
                cell_ids=self.matrix_baseline.cell_ids,
                depart_times=tuple(samples),
                seconds=np.stack(blocks),
            )
        _write_matrix_csv(artifacts[0], self.matrix_baseline)
        _write_matrix_csv(artifacts[1], self.matrix_merged)
        self._write_marker("route")
        self._record(
            "route",
            t0,
            cached=False,
            departures=len(samples),
            cells=len(self.matrix_baseline.cell_ids),
            workers=workers,
        )

    def stage_score(self) -> None:
        artifacts = [self.out / "scores.csv", self.out / "scores_baseline.csv"]
        cached = self._cache_valid("score", artifacts)
        t0 = time.perf_counter()
        if cached:
            self.scores_merged = _read_scores_csv(artifacts[0])
            self.scores_baseline = _read_scores_csv(artifacts[1])
            self._record("score", t0, cached=True)
            return
        self.scores_baseline = []
        self.scores_merged = []
        for depart in self.cfg.samples():
            if self.cfg.score_mode == "diversity":
                self.scores_baseline += acc.score_diversity(
                    self.matrix_baseline, self.grid, self.categories, self.cfg.tau, depart
                )
                self.scores_merged += acc.score_diversity(
                    self.matrix_merged, self.grid, self.categories, self.cfg.tau, depart
                )
            else:
                self.scores_baseline += acc.score(self.matrix_baseline, self.grid, self.cfg.tau, depart)
                self.scores_merged += acc.score(self.matrix_merged, self.grid, self.cfg.tau, depart)
        acc.write_scores_csv(artifacts[0], self.scores_merged)
        acc.write_scores_csv(artifacts[1], self.scores_baseline)
        self._write_marker("score")
        self._record("score", t0, cached=False, scores=len(self.scores_merged))

    def stage_compare(self) -> None:
        t0 = time.perf_counter()
        baseline_avg = acc.daily_average(self.scores_baseline)
        merged_avg = acc.daily_average(self.scores_merged)
        self.records = acc.compare(baseline_avg, merged_avg)
        acc.write_improvement_csv(self.out / "improvement.csv", self.records)
        dump_geojson(
            acc.improvement_geojson(self.grid, self.records, self.projection),
            self.out / "improvement.geojson",
        )
        self._write_marker("compare")
        positive = sum(1 for r in self.records if r.absolute_gain > 0)
        self._record(
            "compare",
            t0,
            cached=False,
            cells=len(self.records),
            positive_gain_cells=positive,
            newly_connected=sum(1 for r in self.records if r.newly_connected),
            mean_relative_gain_low_baseline=acc.mean_relative_gain(self.records),
        )

    # -- driver -----------------------------------------------------------

    def run(self, until: str = "compare") -> RunManifest:
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        order = STAGES[: STAGES.index(until) + 1]
        try:
            for stage in order:
                getattr(self, f"stage_{stage}")()
        except Exception:
            self.manifest.status = "failed"
            self.manifest.failed_stage = stage
            raise
        finally:
            self._write_manifest()
        return self.manifest

    def _write_manifest(self) -> None:
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run(cfg: RunConfig, until: str = "compare") -> RunManifest:
    """Execute the pipeline (or its prefix up to ``until``)."""
    return PipelineRun(cfg).run(until)


# -- artifact serialization ----------------------------------------------


def _write_surfaces_csv(path, surfaces) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["hub_id", "direction", "slot_start", "slot_length", "centroid_id", "w_hat_s", "y_hat_s", "support", "flags", "fallback"]
        )
        for (hub_id, direction), slots in sorted(surfaces.items()):
            for slot_start, s in sorted(slots.items()):
                for cid in sorted(s.wait_estimate):
                    w.writerow(
                        [
                            hub_id,
                            direction,
                            slot_start,
                            s.slot_length,
                            cid,
                            repr(s.wait_estimate[cid]),
                            repr(s.travel_estimate[cid]),
                            s.support.get(cid, 0),
                            "|".join(s.flags.get(cid, ())),
                            s.fallback or "",
                        ]
                    )


def _read_surfaces_csv(path):
    surfaces: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["hub_id"], rec["direction"])
            slot_start = int(rec["slot_start"])
            slots = surfaces.setdefault(key, {})
            s = slots.get(slot_start)
            if s is None:
                s = geostat.EstimateSurface(
                    hub_id=rec["hub_id"],
                    direction=Direction(rec["direction"]),
                    slot_start=slot_start,
                    slot_length=int(rec["slot_length"]),
                    fallback=rec["fallback"] or None,
                )
                slots[slot_start] = s
            cid = int(rec["centroid_id"])
            s.wait_estimate[cid] = float(rec["w_hat_s"])
            s.travel_estimate[cid] = float(rec["y_hat_s"])
            s.support[cid] = int(rec["support"])
            if rec["flags"]:
                s.flags[cid] = tuple(rec["flags"].split("|"))
    return surfaces


def _write_feeder_csv(path, hubs, feeder) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hub_id", "feeder_radius_m", "centroid_ids"])
        by_id = {h.id: h for h in hubs}
        for hub_id in sorted(feeder):
            radius = by_id[hub_id].feeder_radius if hub_id in by_id else None
            w.writerow(
                [
                    hub_id,
                    repr(radius) if radius is not None else "",
                    "|".join(str(c) for c in sorted(feeder[hub_id])),
                ]
            )


def _read_feeder_csv(path):
    feeder: dict[str, set[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            ids = {int(v) for v in rec["centroid_ids"].split("|")} if rec["centroid_ids"] else set()
            feeder[rec["hub_id"]] = ids
    return feeder


def _dump_variograms(path, datasets, cfg: RunConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hub_id", "direction", "slot_start", "field", "lag_m", "semivariance", "pair_count", "sill", "range_m"])
        for ds in datasets:
            for name, values in (("wait", [o.wait for o in ds.observations]), ("travel", [o.in_vehicle for o in ds.observations])):
                samples = [(o.origin, v) for o, v in zip(ds.observations, values)]
                if len(samples) < 2:
                    continue
                try:
                    ev = geostat.experimental_variogram(
                        samples, lag_increment=cfg.lag_increment, max_lag=2 * cfg.variogram_range
                    )
                    model = geostat.fit_bounded_linear(ev, range_m=cfg.variogram_range)
                except ValueError:
                    continue
                for b in ev.bins:
                    w.writerow(
                        [ds.hub_id, ds.direction.value, ds.slot_start, name, repr(b.lag), repr(b.semivariance), b.pair_count, repr(model.sill), repr(model.range_m)]
                    )


def _write_matrix_csv(path, matrix: router.TravelTimeMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["depart_s", "from_id", "to_id", "travel_s"])
        for ti, depart in enumerate(matrix.depart_times):
            for i, u in enumerate(matrix.cell_ids):
                for j, v in enumerate(matrix.cell_ids):
                    w.writerow([depart, u, v, repr(float(matrix.seconds[ti, i, j]))])


def _read_matrix_csv(path) -> router.TravelTimeMatrix:
    entries: dict[int, dict[tuple[int, int], float]] = {}
    ids: set[int] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            depart = int(rec["depart_s"])
            u, v = int(rec["from_id"]), int(rec["to_id"])
            entries.setdefault(depart, {})[(u, v)] = float(rec["travel_s"])
            ids.add(u)
    cell_ids = tuple(sorted(ids))
    departs = tuple(sorted(entries))
    pos = {cid: k for k, cid in enumerate(cell_ids)}
    seconds = np.full((len(departs), len(cell_ids), len(cell_ids)), float("inf"))
    for ti, depart in enumerate(departs):
        for (u, v), value in entries[depart].items():
            seconds[ti, pos[u], pos[v]] = value
    return router.TravelTimeMatrix(cell_ids=cell_ids, depart_times=departs, seconds=seconds)


def _read_scores_csv(path) -> list[acc.AccessibilityScore]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(
                acc.AccessibilityScore(
                    centroid_id=int(rec["centroid_id"]),
                    depart=int(rec["depart"]),
                    reachable_opportunities=float(rec["score"]),
                    reachable_cells=0,
                )
            )
    return out


def _read_walk_overrides(path):
    if not path:
        return None
    overrides: dict[tuple[str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            overrides[(rec["from_stop"].strip(), rec["to_stop"].strip())] = float(rec["seconds"])
    return overrides


def _bundle_for_sample(merged: gtfs.GTFSBundle, sample: int) -> gtfs.GTFSBundle:
    """Type-2 systems get one graph per query time: keep base trips plus the
    virtual trips departing exactly at the sample."""
    virtual_routes = {r.route_id for r in merged.routes if synthesis.is_virtual_route_id(r.route_id)}
    by_trip = merged.stop_times_by_trip()
    keep_trips = []
    for trip in merged.trips:
        if trip.route_id not in virtual_routes:
            keep_trips.append(trip)
            continue
        sts = by_trip.get(trip.trip_id, [])
        if sts and sts[0].departure_s == sample:
            keep_trips.append(trip)
    keep_ids = {t.trip_id for t in keep_trips}
    return gtfs.GTFSBundle(
        stops=list(merged.stops),
        routes=list(merged.routes),
        trips=keep_trips,
        stop_times=[st for st in merged.stop_times if st.trip_id in keep_ids],
        calendar=list(merged.calendar),
    )
