import json

import numpy as np
import pytest

from racestack import cli
from racestack.camera import CameraModel
from racestack.sim.sensors import DEFAULT_CAMERAS

SLIPPERY = {"name": "slippery", "track": "circle", "vehicle": {"mu": 0.3}, "termination": {"max_time": 30}}


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


def test_run_oval_exit_zero_and_files(oval_run_dir):
    code, out = oval_run_dir
    assert code == 0
    for f in ("metrics.json", "trace.csv", "gg.csv", "timing.csv", "map.csv", "map_completion.csv", "config.json"):
        assert (out / f).is_file(), f
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["track"] == "oval" and cfg["seed"] == 0


def test_run_negative_lidar_range(tmp_path, capsys):
    sc = write_json(tmp_path / "s.json", {"sensors": {"lidar": {"range": -5}}})
    assert cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 2
    assert "sensors.lidar.range" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_run_divergence_exit_status(tmp_path):
    sc = write_json(tmp_path / "s.json", SLIPPERY)
    assert cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 1
    m = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert m["diverged"] and "boundary" in m["cause"]


def test_run_same_seed_identical_metrics(tmp_path):
    sc = write_json(tmp_path / "s.json", {"track": "corridor", "seed": 5})
    for d in ("a", "b"):
        assert cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_flag_overrides_scenario_and_env_default(tmp_path, monkeypatch):
    sc = write_json(tmp_path / "s.json", {"name": "probe", "track": "corridor", "seed": 1})
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", "--scenario", str(sc), "--seed", "2"]) == 0
    out = tmp_path / "root" / "probe-seed2"
    assert json.loads((out / "config.json").read_text())["seed"] == 2


def test_report_oval(oval_run_dir, tmp_path):
    _, out = oval_run_dir
    assert cli.main(["report", "--log", str(out), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "report_timing.csv").read_text().splitlines()
    modules = [r.split(",")[0] for r in rows[1:]]
    assert set(modules) >= {"clustering", "perception", "camera", "localization", "planning", "control", "pipeline"}
    assert len(modules) == len(set(modules))
    assert (tmp_path / "report_gg.csv").is_file() and (tmp_path / "report_map.csv").is_file()


def test_report_without_camera(tmp_path):
    # without cone colours the planner has no path, so the run itself stops after warm-up
    sc = write_json(tmp_path / "s.json", {"track": "corridor", "sensors": {"camera": {"enabled": False}}})
    assert cli.main(["run", "--scenario", str(sc), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["report", "--log", str(tmp_path / "o")]) == 0
    modules = [r.split(",")[0] for r in (tmp_path / "o" / "report_timing.csv").read_text().splitlines()[1:]]
    assert "camera" not in modules and "perception" in modules


def test_report_empty_dir(tmp_path, capsys):
    assert cli.main(["report", "--log", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "metrics.json" in err and "trace.csv" in err


def _pairs_csv(path, n, degree_noise=0.0):
    cam = DEFAULT_CAMERAS[1]
    ground, pix = cam.calibration_pairs(n, np.random.default_rng(0), degree_noise)
    lines = ["x,y,u,v"] + [f"{g[0]},{g[1]},{p[0]},{p[1]}" for g, p in zip(ground, pix)]
    path.write_text("\n".join(lines) + "\n")
    return ground, pix


def test_calibrate_degree3(tmp_path, capsys):
    _pairs_csv(tmp_path / "p.csv", 200)
    assert cli.main(["calibrate", "--pairs", str(tmp_path / "p.csv"), "--degree", "3", "--out", str(tmp_path / "m.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    # also below 1 px when read as a per-point Euclidean error
    assert out["rms_px"] * np.sqrt(2) < 1.0
    assert CameraModel.load(tmp_path / "m.json").degree == 3


def test_calibrate_too_few_pairs(tmp_path, capsys):
    _pairs_csv(tmp_path / "p.csv", 5)
    assert cli.main(["calibrate", "--pairs", str(tmp_path / "p.csv"), "--degree", "3"]) == 2
    assert "16" in capsys.readouterr().err


def test_calibrate_degree0_is_scatter(tmp_path, capsys):
    _, pix = _pairs_csv(tmp_path / "p.csv", 50)
    assert cli.main(["calibrate", "--pairs", str(tmp_path / "p.csv"), "--degree", "0"]) == 0
    rms = json.loads(capsys.readouterr().out)["rms_px"]
    # rms is taken over the u and v residual entries
    scatter = np.sqrt(np.mean((pix - pix.mean(0)) ** 2))
    assert rms == pytest.approx(scatter, rel=1e-9)


def test_replay_perception(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["frame,x,y,z"]
    for cx, cy in ((5.0, 1.0), (8.0, -2.0)):
        for p in rng.normal([cx, cy, 0.15], 0.03, (20, 3)):
            rows.append(f"f0,{p[0]},{p[1]},{p[2]}")
    (tmp_path / "c.csv").write_text("\n".join(rows) + "\n")
    assert cli.main(["replay", "--module", "perception", "--input", str(tmp_path / "c.csv"), "--out", str(tmp_path / "o.csv")]) == 0
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["frame", "x", "y"] and len(lines) == 3


def test_replay_localization(tmp_path):
    rows = ["t,n_rl,n_rr,psi_dot"] + [f"{i * 0.01},1,1,0" for i in range(101)]
    (tmp_path / "o.csv").write_text("\n".join(rows) + "\n")
    assert cli.main(["replay", "--module", "localization", "--input", str(tmp_path / "o.csv"),
                     "--out", str(tmp_path / "p.csv")]) == 0
    last = (tmp_path / "p.csv").read_text().splitlines()[-1].split(",")
    # 1 s at one wheel revolution per second
    assert float(last[1]) == pytest.approx(2 * np.pi * 0.2, rel=1e-6)


def test_replay_empty_and_bad_schema(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("")
    assert cli.main(["replay", "--module", "perception", "--input", str(tmp_path / "e.csv"), "--out", str(tmp_path / "o.csv")]) == 0
    assert len((tmp_path / "o.csv").read_text().splitlines()) <= 1
    (tmp_path / "b.csv").write_text("frame,x,y\nf0,1,2\n")
    assert cli.main(["replay", "--module", "perception", "--input", str(tmp_path / "b.csv")]) == 2
    assert "z" in capsys.readouterr().err


def test_replay_planner_and_mpc(tmp_path):
    cones = ["x,y,color"] + [f"{i * 3.0},1.5,blue" for i in range(12)] + [f"{i * 3.0},-1.5,yellow" for i in range(12)]
    (tmp_path / "cones.csv").write_text("\n".join(cones) + "\n")
    assert cli.main(["replay", "--module", "planner", "--input", str(tmp_path / "cones.csv"),
                     "--start", "0,0,0", "--out", str(tmp_path / "path.csv")]) == 0
    states = ["t,x,y,psi,v_x,v_y,r"] + [f"{i * 0.02},{i * 0.2},0.3,0,10,0,0" for i in range(5)]
    (tmp_path / "s.csv").write_text("\n".join(states) + "\n")
    assert cli.main(["replay", "--module", "mpc", "--input", str(tmp_path / "s.csv"), "--path", str(tmp_path / "path.csv"),
                     "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "t,v_x,du_1,u_out,cost,residual,truncated" and len(lines) == 6
    # vehicle sits left of the centreline, so it steers right
    assert float(lines[-1].split(",")[3]) < 0
