"""Accessibility of public transport combined with shared-mobility feeders.

The package turns a dataset of observed feeder trips into a GTFS-compatible
virtual schedule (via ordinary kriging of waiting and in-vehicle times),
merges it with a conventional timetable into a time-expanded graph, and
scores isochrone accessibility per hexagonal cell.
"""

from .geometry import (
    Bounds,
    HexCell,
    HexGrid,
    LocalProjection,
    Point,
    distance,
    locate,
    tessellate,
)
from .observations import Direction, Hub, Observation, TimeslotDataset, bucket, classify, derive_feeder_area, ingest
from .geostat import (
    ExperimentalVariogram,
    KrigingSystem,
    VariogramModel,
    estimate_surface,
    experimental_variogram,
    fit_bounded_linear,
    krige,
)
from .synthesis import VirtualLine, VirtualTrip, synthesize_line, synthesize_type2_trip, write_gtfs
from .router import WalkModel, build_graph, earliest_arrival, travel_time_matrix
from .accessibility import compare, daily_average, score

__version__ = "0.1.0"
