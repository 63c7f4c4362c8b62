import csv
import hashlib
import json
from pathlib import Path

import pytest

from conftest import write_scenario
from sms_access import cli
from sms_access.pipeline import config_hash, load_config, parse_time_literal, run


def tree_digest(out_dir, exclude=("manifest.json",)):
    digests = {}
    for path in sorted(Path(out_dir).rglob("*")):
        if path.is_file() and path.name not in exclude:
            digests[str(path.relative_to(out_dir))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def read_improvement(out_dir):
    with open(Path(out_dir) / "improvement.csv", newline="") as fh:
        return {int(r["centroid_id"]): r for r in csv.DictReader(fh)}


class TestEndToEnd:
    def test_improvement_exactly_inside_feeder_area(self, scenario):
        cfg = load_config(scenario["config"])
        manifest = run(cfg)
        assert manifest.status == "ok"

        rows = read_improvement(scenario["out_dir"])
        feeder = scenario["feeder_cells"]
        assert feeder  # sanity: the scenario has a nonempty feeder area
        positives = {cid for cid, r in rows.items() if float(r["absolute_gain"]) > 0}
        assert positives == feeder
        for cid, r in rows.items():
            if cid not in feeder:
                assert float(r["absolute_gain"]) == 0.0
            else:
                assert r["newly_connected"] == "1"  # baseline had no transit at all

    def test_rerun_with_same_seed_is_byte_identical(self, scenario):
        out1 = scenario["root"] / "out1"
        out2 = scenario["root"] / "out2"
        run(load_config(scenario["config"], {"out_dir": str(out1)}))
        run(load_config(scenario["config"], {"out_dir": str(out2)}))
        d1, d2 = tree_digest(out1), tree_digest(out2)
        assert d1 == d2
        assert any(name.startswith("gtfs_merged/") for name in d1)

    def test_cached_rerun_reuses_stages_and_outputs(self, scenario):
        cfg = load_config(scenario["config"])
        run(cfg)
        before = tree_digest(scenario["out_dir"])
        manifest = run(load_config(scenario["config"]))
        cached = {s.name: s.cached for s in manifest.stages}
        assert cached["estimate"] and cached["synthesize"] and cached["route"] and cached["score"]
        assert tree_digest(scenario["out_dir"]) == before

    def test_stagewise_equals_single_run(self, tmp_path):
        staged = write_scenario(tmp_path / "staged", seed=3)
        single = write_scenario(tmp_path / "single", seed=3)
        for stage in ("tessellate", "estimate", "synthesize", "route", "score", "compare"):
            run(load_config(staged["config"]), until=stage)
        run(load_config(single["config"]))
        assert tree_digest(staged["out_dir"]) == tree_digest(single["out_dir"])

    def test_zero_observations_gives_zero_improvement(self, scenario):
        empty = scenario["root"] / "empty.csv"
        header = scenario["observations"].read_text().splitlines()[0]
        empty.write_text(header + "\n")
        out = scenario["root"] / "out_empty"
        cfg = load_config(scenario["config"], {"observations": str(empty), "out_dir": str(out)})
        manifest = run(cfg)
        assert manifest.status == "ok"
        rows = read_improvement(out)
        assert rows and all(float(r["absolute_gain"]) == 0.0 for r in rows.values())

    def test_type2_connects_feeder_cells_without_waits(self, scenario):
        out = scenario["root"] / "out_t2"
        cfg = load_config(scenario["config"], {"system_type": 2, "out_dir": str(out)})
        run(cfg)
        rows = read_improvement(out)
        positives = {cid for cid, r in rows.items() if float(r["absolute_gain"]) > 0}
        assert positives == scenario["feeder_cells"]

    def test_diversity_mode_counts_categories(self, scenario):
        # Rewrite the opportunity layer with two categories outside the
        # feeder disc; feeder cells go from reaching zero categories to two.
        text = scenario["opportunities"].read_text().splitlines()
        rows = ["lon,lat,category,count"]
        for k, line in enumerate(text[1:]):
            lon, lat, count = line.split(",")
            rows.append(f"{lon},{lat},{'shop' if k % 2 else 'school'},{count}")
            rows.append(f"{lon},{lat},{'school' if k % 2 else 'shop'},{count}")
        scenario["opportunities"].write_text("\n".join(rows) + "\n")
        out = scenario["root"] / "out_div"
        run(load_config(scenario["config"], {"score_mode": "diversity", "out_dir": str(out)}))
        rows = read_improvement(out)
        feeder = scenario["feeder_cells"]
        for cid in feeder:
            assert float(rows[cid]["baseline"]) == 0.0
            assert float(rows[cid]["with_sms"]) == 2.0

    def test_variogram_dump_artifact(self, scenario):
        cfg = load_config(scenario["config"], {"dump_variograms": True})
        run(cfg, until="estimate")
        path = scenario["out_dir"] / "variograms.csv"
        assert path.exists()
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows
        assert {"hub_id", "direction", "slot_start", "field", "lag_m", "semivariance", "pair_count", "sill", "range_m"} <= set(rows[0])
        assert {r["field"] for r in rows} == {"wait", "travel"}

    def test_walk_override_file_is_parsed(self, tmp_path):
        from sms_access.pipeline import _read_walk_overrides

        path = tmp_path / "walks.csv"
        path.write_text("from_stop,to_stop,seconds\nA,B,120\nB,A,150.5\n")
        overrides = _read_walk_overrides(str(path))
        assert overrides == {("A", "B"): 120.0, ("B", "A"): 150.5}
        assert _read_walk_overrides(None) is None

    def test_failed_stage_recorded_in_manifest(self, scenario):
        (scenario["gtfs_dir"] / "stops.txt").unlink()
        out = scenario["out_dir"]
        with pytest.raises(FileNotFoundError):
            run(load_config(scenario["config"]))
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed"
        assert manifest["failed_stage"] == "tessellate"


class TestConfig:
    def test_time_literals(self):
        assert parse_time_literal("05:00") == 18000
        assert parse_time_literal("23:00:30") == 82830
        assert parse_time_literal("3600") == 3600

    def test_load_and_override(self, scenario):
        cfg = load_config(scenario["config"], {"tau": 1800.0, "rng_seed": 9})
        assert cfg.tau == 1800.0
        assert cfg.rng_seed == 9
        assert cfg.day_window == (18000, 82800)
        assert Path(cfg.observations).is_absolute()

    def test_default_departure_samples_are_hourly_in_window(self, scenario):
        cfg = load_config(scenario["config"])
        samples = cfg.samples()
        assert samples[0] == 18000 and samples[-1] == 82800 - 3600
        assert all(b - a == 3600 for a, b in zip(samples, samples[1:]))

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense = 1\n")
        with pytest.raises(ValueError, match="nonsense"):
            load_config(bad)

    def test_missing_required_keys_rejected(self, tmp_path):
        partial = tmp_path / "partial.cfg"
        partial.write_text("observations = x.csv\n")
        with pytest.raises(ValueError, match="missing required"):
            load_config(partial)

    def test_invalid_values_rejected(self, scenario):
        cfg = load_config(scenario["config"], {"slot_length": 5000})
        with pytest.raises(ValueError, match="slot_length"):
            cfg.validate()
        cfg = load_config(scenario["config"], {"system_type": 3})
        with pytest.raises(ValueError, match="system_type"):
            cfg.validate()

    def test_config_hash_tracks_semantic_fields_only(self, scenario):
        base = load_config(scenario["config"])
        assert config_hash(base) == config_hash(load_config(scenario["config"]))
        assert config_hash(base) != config_hash(load_config(scenario["config"], {"tau": 1800.0}))
        assert config_hash(base) != config_hash(load_config(scenario["config"], {"rng_seed": 1}))
        same = load_config(scenario["config"], {"workers": 7, "out_dir": "/somewhere/else"})
        assert config_hash(base) == config_hash(same)


class TestCli:
    def test_run_subcommand_succeeds(self, scenario):
        rc = cli.main(["run", "--config", str(scenario["config"])])
        assert rc == 0
        assert (scenario["out_dir"] / "improvement.csv").exists()
        assert (scenario["out_dir"] / "improvement.geojson").exists()
        assert (scenario["out_dir"] / "scores.csv").exists()

    def test_single_stage_subcommand(self, scenario):
        rc = cli.main(["tessellate", "--config", str(scenario["config"])])
        assert rc == 0
        assert (scenario["out_dir"] / "grid.geojson").exists()
        assert not (scenario["out_dir"] / "improvement.csv").exists()

    def test_bad_config_fails_with_nonzero_exit(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("observations = missing.csv\ngtfs_dir = g\nopportunities = o.csv\nout_dir = out\n")
        assert cli.main(["run", "--config", str(bad)]) == 1

    def test_seed_override_changes_gtfs(self, scenario):
        out_a = scenario["root"] / "out_a"
        out_b = scenario["root"] / "out_b"
        assert cli.main(["run", "--config", str(scenario["config"]), "--out", str(out_a), "--seed", "1"]) == 0
        assert cli.main(["run", "--config", str(scenario["config"]), "--out", str(out_b), "--seed", "2"]) == 0
        a = (out_a / "gtfs_merged" / "stop_times.txt").read_bytes()
        b = (out_b / "gtfs_merged" / "stop_times.txt").read_bytes()
        assert a != b
