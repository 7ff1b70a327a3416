import json

import numpy as np
import pytest

from activedet.cli import main
from activedet.config import ConfigError, EngineConfig, load_config, merge
from activedet.model import BoundingBox, FrameRecord, Manifest, ProbabilityStack, write_manifest, write_probability_stack
from activedet.selection import load_pool


@pytest.fixture
def dataset(tmp_path):
    """Two videos of 12 frames plus one constant frame, as a manifest on disk."""
    rng = np.random.default_rng(0)
    frames = []
    for v in range(2):
        for t in range(12):
            fid = f"v{v}_t{t:02d}"
            data = rng.uniform(0.0, 1.0, size=(2, 1, 24, 32)).astype(np.float32)
            write_probability_stack(ProbabilityStack(fid, data), tmp_path / f"{fid}.alpm")
            boxes = [BoundingBox(1, 1, 30, 60)] * (t % 3)
            frames.append(FrameRecord(fid, f"v{v}", t, f"{fid}.alpm", boxes))
    write_probability_stack(ProbabilityStack("flat", np.full((2, 1, 24, 32), 0.3, np.float32)),
                            tmp_path / "flat.alpm")
    frames.append(FrameRecord("flat", stack_path="flat.alpm", annotations=[]))
    write_manifest(Manifest(frames), tmp_path / "manifest.json")
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def test_ttc_prints_hours(capsys):
    assert run("ttc", "--N", 51363, "--b", 500, "--B", 7500) == 0
    assert "196.6 h" in capsys.readouterr().out


def test_ttc_writes_pair(tmp_path):
    assert run("ttc", "--N", 51363, "--b", 2500, "--out", tmp_path / "t.json") == 0
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["B"] == 7500 and doc["hours"] == pytest.approx(47.77, abs=0.01)
    assert (tmp_path / "t.csv").read_text().startswith("N,B,b,")


@pytest.mark.parametrize("argv", [
    ["ttc", "--N", "100", "--b", "0"],
    ["ttc", "--N", "100", "--b", "30", "--B", "100"],
    ["ttc"],
    ["bogus"],
    [],
    ["simulate", "--strategy", "proposed"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_score_constant_stack_is_zero(dataset, capsys):
    assert run("score", "--manifest", dataset / "manifest.json", "--workers", 1) == 0
    lines = dict(l.split("\t") for l in capsys.readouterr().out.splitlines())
    assert float(lines["flat"]) == 0.0
    assert float(lines["v0_t00"]) > 0.0


def test_score_worker_count_independent(dataset):
    for n in (1, 3):
        assert run("score", "--manifest", dataset / "manifest.json", "--workers", n,
                   "--out", dataset / f"s{n}.json") == 0
    assert (dataset / "s1.json").read_bytes() == (dataset / "s3.json").read_bytes()
    assert (dataset / "s1.csv").read_bytes() == (dataset / "s3.csv").read_bytes()


def test_score_dump_then_aggregate(dataset):
    assert run("score", "--manifest", dataset / "manifest.json", "--radius", 2, "--region-size", "8x8",
               "--dump-maps", dataset / "maps", "--out", dataset / "s.json") == 0
    doc = json.loads((dataset / "s.json").read_text())
    entry = doc["frames"][0]
    assert run("aggregate", "--map", entry["map"], "--scale", entry["map_scale"], "--region-size", "8x8",
               "--out", dataset / "a.json") == 0
    agg = json.loads((dataset / "a.json").read_text())["frames"][0]
    assert agg["score"] == pytest.approx(entry["score"], abs=1e-6)


def test_missing_stack_exits_2(dataset, capsys):
    (dataset / "v0_t03.alpm").unlink()
    assert run("score", "--manifest", dataset / "manifest.json") == 2
    assert "data error" in capsys.readouterr().err


def test_corrupt_stack_exits_2(dataset):
    (dataset / "v0_t03.alpm").write_bytes(b"XXXX" + bytes(40))
    assert run("score", "--manifest", dataset / "manifest.json") == 2


def test_select_respects_rules(dataset, capsys):
    run("score", "--manifest", dataset / "manifest.json", "--out", dataset / "s.json")
    capsys.readouterr()
    assert run("select", "--scores", dataset / "s.json", "--manifest", dataset / "manifest.json",
               "--b", 3, "--dt1", 15, "--out", dataset / "sel.json") == 0
    doc = json.loads((dataset / "sel.json").read_text())
    vids = [f.split("_")[0] for f in doc["selected"] if f != "flat"]
    assert len(vids) == len(set(vids))


def test_select_missing_score_exits_2(dataset, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"frames": [{"frame_id": "v0_t00", "score": 1.0}]}))
    assert run("select", "--scores", tmp_path / "s.json", "--manifest", dataset / "manifest.json", "--b", 2) == 2


def test_select_random_requires_seed(dataset, tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"frames": []}))
    argv = ["select", "--scores", tmp_path / "s.json", "--manifest", dataset / "manifest.json",
            "--b", 2, "--strategy", "guided-random"]
    assert run(*argv) == 1
    assert run(*argv, "--seed", 4) == 0


def test_cycle_and_report(dataset, capsys):
    pool = dataset / "pool.state"
    argv = ["cycle", "run", "--manifest", dataset / "manifest.json", "--pool", pool,
            "--B", 8, "--b", 4, "--radius", 2, "--region-size", "8x8", "--dt1", 3]
    assert run(*argv) == 1
    assert run(*argv, "--seed", 1) == 0
    state = load_pool(pool)
    assert len(state.labeled) == 4 and state.cycle_index == 1
    assert (dataset / "pool_training" / "train_cycle000.json").exists()
    assert run(*argv, "--cycles", 0) == 0
    state = load_pool(pool)
    assert len(state.labeled) == 8
    assert run(*argv) == 2
    capsys.readouterr()
    assert run("report", "--pool", pool, "--manifest", dataset / "manifest.json") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("cycle,") and len(out) == 3


def test_cycle_rejects_plan_change(dataset):
    pool = dataset / "pool.state"
    base = ["cycle", "run", "--manifest", dataset / "manifest.json", "--pool", pool, "--strategy", "guided-random"]
    assert run(*base, "--B", 8, "--b", 4, "--seed", 2) == 0
    assert run(*base, "--B", 8, "--b", 2) == 1


def test_tampered_pool_exits_2(dataset):
    pool = dataset / "pool.state"
    base = ["cycle", "run", "--manifest", dataset / "manifest.json", "--pool", pool,
            "--strategy", "guided-random", "--B", 8, "--b", 4]
    assert run(*base, "--seed", 2) == 0
    pool.write_text(pool.read_text().replace('"cycle_index":1', '"cycle_index":0'))
    assert run(*base) == 2


def test_simulate_outputs(tmp_path):
    world = tmp_path / "w.json"
    world.write_text(json.dumps({"num_videos": 2, "frames_per_video": 30, "b": 5, "B": 15}))
    assert run("simulate", "--world-config", world, "--strategy", "proposed", "--seeds", 2, "--seed", 0,
               "--out", tmp_path / "sim.csv") == 0
    rows = (tmp_path / "sim.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3 + 3
    assert json.loads((tmp_path / "sim.json").read_text())["strategy"] == "proposed"


def test_simulate_bad_world_key(tmp_path):
    world = tmp_path / "w.json"
    world.write_text(json.dumps({"num_vidoes": 2}))
    assert run("simulate", "--world-config", world, "--seed", 0) == 1


def test_config_file_merged_flags_win(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"b": 2500, "epochs": 50}))
    assert run("ttc", "--N", 51363, "--config", cfg) == 0
    assert "47.8 h" in capsys.readouterr().out
    assert run("ttc", "--N", 51363, "--config", cfg, "--b", 500) == 0
    assert "196.6 h" in capsys.readouterr().out


def test_unknown_config_key_reports_line(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "radius": 9,\n  "raduis": 3\n}\n')
    assert run("ttc", "--N", 10, "--b", 1, "--B", 2, "--config", cfg) == 1
    assert f"{cfg}:3" in capsys.readouterr().err


def test_config_type_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"radius": "nine"}')
    with pytest.raises(ConfigError, match=":1:"):
        load_config(cfg)
    cfg.write_text('{"mirror": 1}')
    with pytest.raises(ConfigError):
        load_config(cfg)


def test_config_defaults():
    cfg = EngineConfig()
    assert (cfg.radius, cfg.region_size, cfg.smooth_window, cfg.dt1, cfg.dt2, cfg.b) == (9, "30x30", 5, 15, 2, 500)
    merged = merge({"radius": 3}, {"radius": None, "dt1": 7})
    assert merged.radius == 3 and merged.dt1 == 7
