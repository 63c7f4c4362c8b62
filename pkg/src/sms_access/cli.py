"""Command-line interface.

    sms-access <subcommand> --config <path> [--seed N] [--workers N] [overrides]

Subcommands run the pipeline up to the named stage, reusing cached
intermediates whose configuration hash still matches: tessellate, estimate,
synthesize, route, score, compare, and run (everything). The SMS_ACCESS_LOG
environment variable sets the log level (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline

log = logging.getLogger(__name__)

_OVERRIDE_FLAGS = (
    ("--observations", "observations", str),
    ("--gtfs-dir", "gtfs_dir", str),
    ("--opportunities", "opportunities", str),
    ("--out", "out_dir", str),
    ("--hex-side", "hex_side", float),
    ("--tau", "tau", float),
    ("--slot-length", "slot_length", int),
    ("--lag-increment", "lag_increment", float),
    ("--variogram-range", "variogram_range", float),
    ("--walk-speed", "walk_speed", float),
    ("--walk-detour", "walk_detour", float),
    ("--max-walk", "max_walk", float),
    ("--walk-overrides", "walk_overrides", str),
    ("--system-type", "system_type", int),
    ("--hub-tolerance", "hub_tolerance", float),
    ("--min-samples", "min_samples", int),
    ("--wait-floor", "wait_floor", int),
    ("--max-feeder-radius", "max_feeder_radius", float),
    ("--score-mode", "score_mode", str),
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="key = value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed for departure anchors")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers (0 = all cores)")
    parser.add_argument("--bounds", default=None, help="lon_min,lat_min,lon_max,lat_max")
    parser.add_argument("--day-window", default=None, help="start-end, e.g. 05:00-23:00")
    parser.add_argument("--departure-samples", default=None, help="comma-separated times or 'hourly'")
    parser.add_argument("--dump-variograms", action="store_true", default=None)
    for flag, _, kind in _OVERRIDE_FLAGS:
        parser.add_argument(flag, type=kind, default=None)


def _overrides(args: argparse.Namespace) -> dict:
    values: dict = {}
    for flag, field, _ in _OVERRIDE_FLAGS:
        v = getattr(args, flag.lstrip("-").replace("-", "_"))
        if v is not None:
            values[field] = v
    if args.seed is not None:
        values["rng_seed"] = args.seed
    if args.workers is not None:
        values["workers"] = args.workers
    if args.bounds is not None:
        values["bounds_lonlat"] = pipeline._coerce("bounds_lonlat", args.bounds)
    if args.day_window is not None:
        values["day_window"] = pipeline._coerce("day_window", args.day_window)
    if args.departure_samples is not None:
        values["departure_samples"] = pipeline._coerce("departure_samples", args.departure_samples)
    if args.dump_variograms:
        values["dump_variograms"] = True
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sms-access",
        description="Accessibility of public transport with shared-mobility feeders, from observed trips.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, until in (
        ("tessellate", "tessellate"),
        ("estimate", "estimate"),
        ("synthesize", "synthesize"),
        ("route", "route"),
        ("score", "score"),
        ("compare", "compare"),
        ("run", "compare"),
    ):
        p = sub.add_parser(name, help=f"run the pipeline up to the {until} stage")
        p.set_defaults(until=until)
        _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SMS_ACCESS_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config, _overrides(args))
        manifest = pipeline.run(cfg, until=args.until)
    except Exception as exc:  # fatal errors abort with a nonzero status
        log.error("%s", exc)
        return 1
    for stage in manifest.stages:
        marker = " (cached)" if stage.cached else ""
        log.info("stage %-10s %.2fs%s %s", stage.name, stage.seconds, marker, stage.records)
    for warning in manifest.warnings:
        log.warning("%s", warning)
    return 0


if __name__ == "__main__":
    sys.exit(main())
