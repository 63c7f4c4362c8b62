"""Time-expanded transit graph and earliest-arrival queries.

Nodes are stoptimes (a vehicle passing a stop at a time). In-vehicle arcs
join consecutive stoptimes of a trip. Transfer arcs join a stoptime to the
earliest boardable stoptime of each (reachable stop, route), where
"boardable" means the walk fits the per-leg cap and lands before departure.

Itinerary semantics for a query from point x at time t: either walk straight
to the target (one capped leg), or walk to a first boarding stop, ride and
transfer through the timetable, and walk from the final alighting stop to
the target. Every walk leg is individually capped; walking through a stop
without boarding there is not a shortcut the graph offers.

Queries use a connection-scan sweep over departure-sorted in-vehicle arcs,
which is equivalent to relaxing the time-expanded DAG in time order but
cache-friendlier.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_left
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import HexGrid, LocalProjection, Point
from .gtfs import GTFSBundle

log = logging.getLogger(__name__)

INF = float("inf")


@dataclass(frozen=True)
class StopNode:
    stop_id: str
    location: Point


@dataclass(frozen=True)
class WalkModel:
    """Straight-line walk times with a detour surrogate for the street grid.

    ``overrides`` optionally pins stop-to-stop walk seconds (directed pairs),
    e.g. from a precomputed street-network matrix; point-to-stop legs always
    use the distance formula.
    """

    speed: float = 1.25
    detour_factor: float = 1.3
    max_walk: float = 900.0
    overrides: Mapping[tuple[str, str], float] | None = None

    def __post_init__(self):
        if self.speed <= 0 or self.max_walk <= 0 or self.detour_factor < 1.0:
            raise ValueError(f"bad walk model {self}")

    def seconds(self, a: Point, b: Point) -> float:
        return math.hypot(a.x - b.x, a.y - b.y) * self.detour_factor / self.speed

    def seconds_between_stops(self, a: StopNode, b: StopNode) -> float:
        if self.overrides is not None:
            v = self.overrides.get((a.stop_id, b.stop_id))
            if v is not None:
                return v
        return self.seconds(a.location, b.location)


@dataclass(frozen=True)
class StoptimeNode:
    stop: int
    arrival_s: int
    departure_s: int
    trip: int
    sequence: int


@dataclass
class TimeExpandedGraph:
    stops: list[StopNode]
    stop_index: dict[str, int]
    nodes: list[StoptimeNode]
    # In-vehicle arcs as (src_node, dst_node) index pairs, one per
    # consecutive stoptime pair of each trip.
    in_vehicle_arcs: list[tuple[int, int]]
    # Parallel connection table sorted by departure for the scan:
    # (dep_time, arr_time, dep_stop, arr_stop, trip).
    connections: list[tuple[int, int, int, int, int]]
    connection_departures: list[int]
    # footpaths[s] = [(other_stop, walk_seconds)] within the walk cap.
    footpaths: list[list[tuple[int, float]]]
    nodes_by_stop: list[list[int]]
    trip_ids: list[str]
    routes_of_trips: list[str]
    walk: WalkModel
    rejected_trips: int = 0
    _transfer_arcs: list[tuple[int, int]] | None = field(default=None, repr=False)

    def transfer_arcs(self) -> list[tuple[int, int]]:
        """Materialized transfer arcs, computed on first use.

        From every stoptime, to the earliest boardable stoptime per
        (reachable stop, route). Dominated later boardings of the same route
        are pruned; they can never improve an earliest arrival.
        """
        if self._transfer_arcs is None:
            self._transfer_arcs = _build_transfer_arcs(self)
        return self._transfer_arcs


def _trip_stop_times(bundle: GTFSBundle):
    by_trip = bundle.stop_times_by_trip()
    for trip in sorted(bundle.trips, key=lambda t: t.trip_id):
        yield trip, by_trip.get(trip.trip_id, [])


def build_graph(
    bundle: GTFSBundle,
    walk: WalkModel,
    projection: LocalProjection | None = None,
) -> TimeExpandedGraph:
    """Build the time-expanded graph from a GTFS bundle.

    Trips with fewer than two stoptimes or with decreasing times are
    rejected with a diagnostic; a stoptime referencing an unknown stop is
    fatal.
    """
    stops: list[StopNode] = []
    stop_index: dict[str, int] = {}
    for s in sorted(bundle.stops, key=lambda s: s.stop_id):
        pt = projection.to_planar(s.lon, s.lat) if projection else Point(s.lon, s.lat)
        stop_index[s.stop_id] = len(stops)
        stops.append(StopNode(stop_id=s.stop_id, location=pt))

    nodes: list[StoptimeNode] = []
    in_vehicle: list[tuple[int, int]] = []
    connections: list[tuple[int, int, int, int, int]] = []
    trip_ids: list[str] = []
    rejected = 0
    route_of_trip: list[str] = []

    for trip, sts in _trip_stop_times(bundle):
        if len(sts) < 2:
            log.warning("trip %s has %d stoptimes; rejected", trip.trip_id, len(sts))
            rejected += 1
            continue
        ok = all(
            sts[i].arrival_s <= sts[i].departure_s and sts[i].departure_s <= sts[i + 1].arrival_s
            for i in range(len(sts) - 1)
        ) and sts[-1].arrival_s <= sts[-1].departure_s
        if not ok:
            log.warning("trip %s has decreasing times; rejected", trip.trip_id)
            rejected += 1
            continue
        for st in sts:
            if st.stop_id not in stop_index:
                raise ValueError(f"stoptime references unknown stop {st.stop_id!r}")
        t_idx = len(trip_ids)
        trip_ids.append(trip.trip_id)
        route_of_trip.append(trip.route_id)
        base = len(nodes)
        for k, st in enumerate(sts):
            nodes.append(
                StoptimeNode(
                    stop=stop_index[st.stop_id],
                    arrival_s=st.arrival_s,
                    departure_s=st.departure_s,
                    trip=t_idx,
                    sequence=st.sequence,
                )
            )
        for k in range(len(sts) - 1):
            in_vehicle.append((base + k, base + k + 1))
            connections.append(
                (
                    sts[k].departure_s,
                    sts[k + 1].arrival_s,
                    stop_index[sts[k].stop_id],
                    stop_index[sts[k + 1].stop_id],
                    t_idx,
                )
            )

    connections.sort(key=lambda c: (c[0], c[4], c[1]))
    dep_times = [c[0] for c in connections]

    footpaths: list[list[tuple[int, float]]] = [[] for _ in stops]
    for i, a in enumerate(stops):
        for j, b in enumerate(stops):
            if i == j:
                continue
            ws = walk.seconds_between_stops(a, b)
            if ws <= walk.max_walk:
                footpaths[i].append((j, ws))

    nodes_by_stop: list[list[int]] = [[] for _ in stops]
    for idx, node in enumerate(nodes):
        nodes_by_stop[node.stop].append(idx)
    for lst in nodes_by_stop:
        lst.sort(key=lambda idx: (nodes[idx].arrival_s, nodes[idx].departure_s))

    return TimeExpandedGraph(
        stops=stops,
        stop_index=stop_index,
        nodes=nodes,
        in_vehicle_arcs=in_vehicle,
        connections=connections,
        connection_departures=dep_times,
        footpaths=footpaths,
        nodes_by_stop=nodes_by_stop,
        trip_ids=trip_ids,
        routes_of_trips=route_of_trip,
        walk=walk,
        rejected_trips=rejected,
    )


def _build_transfer_arcs(g: TimeExpandedGraph) -> list[tuple[int, int]]:
    routes = g.routes_of_trips
    # Per (stop, route): node indices sorted by departure time.
    by_stop_route: dict[tuple[int, str], tuple[list[int], list[int]]] = {}
    for idx, node in enumerate(g.nodes):
        key = (node.stop, routes[node.trip])
        by_stop_route.setdefault(key, ([], []))[1].append(idx)
    for key, (deps, idxs) in by_stop_route.items():
        idxs.sort(key=lambda i: g.nodes[i].departure_s)
        deps.extend(g.nodes[i].departure_s for i in idxs)

    route_keys_by_stop: dict[int, list[str]] = {}
    for stop, route in by_stop_route:
        route_keys_by_stop.setdefault(stop, []).append(route)

    arcs: list[tuple[int, int]] = []
    for src_idx, node in enumerate(g.nodes):
        reachable = [(node.stop, 0.0)] + g.footpaths[node.stop]
        for stop, ws in reachable:
            ready = node.arrival_s + ws
            for route in route_keys_by_stop.get(stop, ()):
                deps, idxs = by_stop_route[(stop, route)]
                k = bisect_left(deps, ready)
                if k < len(idxs):
                    arcs.append((src_idx, idxs[k]))
    return arcs


def _scan(g: TimeExpandedGraph, arr_any: list[float], depart: float) -> list[float]:
    """Connection-scan relaxation. ``arr_any`` holds per-stop earliest times
    reachable for boarding (initialized with the origin walk); returns the
    per-stop earliest arrival with a ride as the final leg."""
    arr_ride = [INF] * len(g.stops)
    boarded = bytearray(len(g.trip_ids))
    footpaths = g.footpaths
    lo = bisect_left(g.connection_departures, depart)
    for k in range(lo, len(g.connections)):
        dep_t, arr_t, dep_stop, arr_stop, trip = g.connections[k]
        if boarded[trip] or arr_any[dep_stop] <= dep_t:
            boarded[trip] = 1
            if arr_t < arr_ride[arr_stop]:
                arr_ride[arr_stop] = arr_t
                if arr_t < arr_any[arr_stop]:
                    arr_any[arr_stop] = arr_t
                for nbr, ws in footpaths[arr_stop]:
                    t2 = arr_t + ws
                    if t2 < arr_any[nbr]:
                        arr_any[nbr] = t2
    return arr_ride


def _stop_xy(g: TimeExpandedGraph) -> np.ndarray:
    return np.array([(s.location.x, s.location.y) for s in g.stops], dtype=float)


def _walk_matrix(walk: WalkModel, points_xy: np.ndarray, stops_xy: np.ndarray) -> np.ndarray:
    """Point-to-stop walk seconds, inf where the leg exceeds the cap."""
    if len(points_xy) == 0 or len(stops_xy) == 0:
        return np.full((len(points_xy), len(stops_xy)), INF)
    d = np.sqrt(
        (points_xy[:, 0:1] - stops_xy[None, :, 0]) ** 2
        + (points_xy[:, 1:2] - stops_xy[None, :, 1]) ** 2
    )
    w = d * walk.detour_factor / walk.speed
    w[w > walk.max_walk] = INF
    return w


def earliest_arrival(
    g: TimeExpandedGraph,
    origin: Point,
    depart: int,
    targets: Sequence[Point],
    walk: WalkModel | None = None,
) -> dict[Point, float]:
    """Earliest arrival time at each target when departing ``origin`` at
    ``depart``. Unreachable targets map to inf."""
    walk = walk or g.walk
    stops_xy = _stop_xy(g)
    origin_xy = np.array([[origin.x, origin.y]], dtype=float)
    targets_xy = np.array([(t.x, t.y) for t in targets], dtype=float).reshape(len(targets), 2)

    origin_w = _walk_matrix(walk, origin_xy, stops_xy)[0]
    arr_any = [depart + w if w < INF else INF for w in origin_w]
    arr_ride = np.array(_scan(g, arr_any, depart))

    target_w = _walk_matrix(walk, targets_xy, stops_xy)
    via_pt = (
        np.min(target_w + arr_ride[None, :], axis=1)
        if len(g.stops)
        else np.full(len(targets), INF)
    )
    d_direct = np.sqrt(((targets_xy - origin_xy) ** 2).sum(axis=1))
    w_direct = d_direct * walk.detour_factor / walk.speed
    direct = np.where(w_direct <= walk.max_walk, depart + w_direct, INF)
    best = np.minimum(via_pt, direct)
    return {t: float(b) for t, b in zip(targets, best)}


@dataclass(frozen=True)
class TravelTimeMatrix:
    """T(u, u', t): seconds from cell u to cell u' when departing at t."""

    cell_ids: tuple[int, ...]
    depart_times: tuple[int, ...]
    seconds: np.ndarray  # shape (len(depart_times), n_cells, n_cells)

    def get(self, from_id: int, to_id: int, depart: int) -> float:
        t = self.depart_times.index(depart)
        i = self.cell_ids.index(from_id)
        j = self.cell_ids.index(to_id)
        return float(self.seconds[t, i, j])


def _matrix_rows(
    g: TimeExpandedGraph,
    cell_xy: np.ndarray,
    cell_walk: np.ndarray,
    pure_walk: np.ndarray,
    depart_times: Sequence[int],
    origin_indices: Sequence[int],
) -> np.ndarray:
    out = np.empty((len(depart_times), len(origin_indices), len(cell_xy)))
    for ti, depart in enumerate(depart_times):
        for oi, o in enumerate(origin_indices):
            arr_any = [depart + w if w < INF else INF for w in cell_walk[o]]
            arr_ride = np.array(_scan(g, arr_any, depart))
            via_pt = np.min(cell_walk + arr_ride[None, :], axis=1) - depart
            row = np.minimum(via_pt, pure_walk[o])
            row[o] = 0.0
            out[ti, oi] = row
    return out


def travel_time_matrix(
    g: TimeExpandedGraph,
    grid: HexGrid,
    depart_times: Sequence[int],
    walk: WalkModel | None = None,
    workers: int = 1,
) -> TravelTimeMatrix:
    """All-pairs centroid travel times for each departure time.

    Queries are independent; with ``workers > 1`` origins are distributed
    over a process pool.
    """
    if not len(grid.cells):
        raise ValueError("grid has no cells")
    walk = walk or g.walk
    cell_ids = tuple(c.id for c in grid.cells)
    cell_xy = np.array([(c.center.x, c.center.y) for c in grid.cells], dtype=float)
    stops_xy = _stop_xy(g)
    cell_walk = _walk_matrix(walk, cell_xy, stops_xy)
    pure_d = np.sqrt(
        (cell_xy[:, 0:1] - cell_xy[None, :, 0]) ** 2
        + (cell_xy[:, 1:2] - cell_xy[None, :, 1]) ** 2
    )
    pure_walk = pure_d * walk.detour_factor / walk.speed
    pure_walk[pure_walk > walk.max_walk] = INF

    n = len(cell_ids)
    all_origins = list(range(n))
    if workers <= 1 or n == 1:
        seconds = _matrix_rows(g, cell_xy, cell_walk, pure_walk, depart_times, all_origins)
    else:
        chunks = [all_origins[i::workers] for i in range(workers)]
        chunks = [c for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(_matrix_rows, g, cell_xy, cell_walk, pure_walk, depart_times, chunk)
                for chunk in chunks
            ]
            seconds = np.empty((len(depart_times), n, n))
            for chunk, fut in zip(chunks, futures):
                block = fut.result()
                for k, o in enumerate(chunk):
                    seconds[:, o, :] = block[:, k, :]
    return TravelTimeMatrix(cell_ids=cell_ids, depart_times=tuple(depart_times), seconds=seconds)
