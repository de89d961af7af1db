"""Command-line entry point: run, replay, calibrate, report.

Exit codes: 0 success, 1 run did not complete (divergence or budget), 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .camera import CameraModel, ClassLabel, RankDeficientError, fit_projection
from .geometry import Pose2D
from .localization.ekf import EkfState, VehicleParams, odometry_process_noise, predict, read_odometry_csv
from .localization.mapping import LandmarkMap
from .mpc import TRACE_COLUMNS, BicycleParams, LateralMpc
from .perception import PerceptionConfig, propose_landmarks, read_cloud_csv
from .planning import extract_centerline, read_path_csv, velocity_profile
from .sim import metrics as metrics_mod
from .sim.loop import build_configs, run_closed_loop
from .sim.scenario import ScenarioConfig, ScenarioError, dump_scenario, load_scenario
from .sim.tracks import load_track

OUT_ENV = "RACESTACK_OUT"
REPLAY_MODULES = ("perception", "localization", "planner", "mpc")

log = logging.getLogger("racestack")


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _scenario(path: str | None, seed: int | None, track: str | None, laps: int | None) -> ScenarioConfig:
    cfg = load_scenario(path) if path else ScenarioConfig()
    over: dict = {}
    if seed is not None:
        over["seed"] = seed
    if track is not None:
        over["track"] = track
    if laps is not None:
        over["termination"] = {**cfg.termination.model_dump(), "laps": laps}
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(flag: str | None, name: str, seed: int) -> Path:
    if flag:
        return Path(flag)
    root = Path(os.environ.get(OUT_ENV) or "runs")
    return root / f"{name}-seed{seed}"


def _read_csv(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if not cols:
        return []
    missing = [c for c in required if c not in cols]
    if missing:
        raise InputError(f"{path}: missing column(s) {', '.join(missing)}; expected {','.join(required)}")
    return rows


def _floats(path, rows, cols) -> np.ndarray:
    out = np.empty((len(rows), len(cols)))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            try:
                out[i, j] = float(r[c])
            except (TypeError, ValueError):
                raise InputError(f"{path}:{i + 2}: column '{c}' has non-numeric value {r[c]!r}") from None
    return out


def _write(path: Path | None, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in row])
    finally:
        if path:
            fh.close()


def _pose(text: str | None) -> Pose2D:
    if not text:
        return Pose2D(0.0, 0.0, 0.0)
    try:
        x, y, psi = (float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"--start expects x,y,psi, got {text!r}") from None
    return Pose2D(x, y, psi)


# --- run ----------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _scenario(args.scenario, args.seed, args.track, args.laps)
    try:
        track = load_track(cfg.track)
    except (OSError, ValueError) as exc:
        raise InputError(f"track: cannot load {cfg.track!r}: {exc}") from None
    out = _out_dir(args.out, cfg.name, cfg.seed)
    run_log = run_closed_loop(track, cfg)
    m = metrics_mod.write_run(out, run_log, dump_scenario(cfg))
    report = {"metrics": m, "out": str(out), "files": sorted(p.name for p in out.iterdir()),
              "exit_status": 0 if run_log.completed else 1}
    print(json.dumps({"out": report["out"], "completed": m["completed"], "lap_times": m["lap_times"],
                      "cause": m["cause"], "peak_lateral_acceleration": m["peak_lateral_acceleration"]}))
    return report["exit_status"]


# --- replay -------------------------------------------------------------------

def _replay_perception(args, cfg: ScenarioConfig):
    try:
        clouds = read_cloud_csv(args.input)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    p = cfg.perception
    pc = PerceptionConfig(p.dbscan_eps, p.dbscan_min_points, tuple(p.max_variance), p.eps1, p.eps2, p.max_range)
    rows = []
    for k, cloud in enumerate(clouds):
        for prop in propose_landmarks(cloud, pc):
            rows.append((k, prop.position[0], prop.position[1], prop.support, prop.timestamp))
    return ["frame", "x", "y", "support", "t"], rows


def _replay_localization(args, cfg: ScenarioConfig):
    try:
        inputs = read_odometry_csv(args.input)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    lc = cfg.localization
    vp = VehicleParams(cfg.vehicle.r_dyn, "rev/s")
    cov = np.diag([lc.wheel_sigma**2, lc.wheel_sigma**2, lc.yaw_sigma**2])
    extra = np.square(lc.extra_process)
    state = EkfState(_pose(args.start), np.diag([1e-4, 1e-4, 1e-5]))
    rows = []
    t_prev = inputs[0].timestamp if inputs else 0.0
    for u in inputs:
        dt = u.timestamp - t_prev
        if dt > 0:
            state = predict(state, u, dt, vp, odometry_process_noise(state.pose.psi, dt, vp, cov, extra))
        t_prev = u.timestamp
        P = state.covariance
        rows.append((u.timestamp, state.pose.x, state.pose.y, state.pose.psi, P[0, 0], P[1, 1], P[2, 2]))
    return ["t", "x", "y", "psi", "var_x", "var_y", "var_psi"], rows


def _replay_planner(args, cfg: ScenarioConfig):
    rows = _read_csv(args.input, ("x", "y", "color"))
    header = ["s", "x", "y", "psi", "kappa", "v_target"]
    if not rows:
        return header, []
    xy = _floats(args.input, rows, ("x", "y"))
    cones = []
    for i, (r, p) in enumerate(zip(rows, xy)):
        try:
            cones.append((p, ClassLabel(r["color"])))
        except ValueError:
            raise InputError(f"{args.input}:{i + 2}: column 'color' has unknown class {r['color']!r}") from None
    _, _, _, _, plan, ggs, _, _ = build_configs(cfg)
    lmap = LandmarkMap.from_cones(cones, count=cfg.localization.n_confirm)
    path = extract_centerline(lmap, _pose(args.start), plan.lookahead, plan)
    if len(path) < 2:
        log.warning("no centreline: %s", path.reason)
        return header, []
    prof = velocity_profile(path, ggs.scaled(plan.profile_scale), None, cfg.planner.v_floor)
    return header, path.to_rows(prof.v_target)


def _replay_mpc(args, cfg: ScenarioConfig):
    cols = ("t", "x", "y", "psi", "v_x", "v_y", "r")
    rows = _read_csv(args.input, cols)
    if not rows:
        return TRACE_COLUMNS, []
    if not args.path:
        raise InputError("--path: the mpc module needs a centreline CSV (s,x,y,psi,kappa[,v_target])")
    try:
        path, prof = read_path_csv(args.path)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if prof is None:
        _, _, _, _, plan, ggs, _, _ = build_configs(cfg)
        prof = velocity_profile(path, ggs.scaled(plan.profile_scale))
    _, _, _, _, _, _, mpc_cfg, _ = build_configs(cfg)
    v = cfg.vehicle
    mpc = LateralMpc(mpc_cfg, BicycleParams(v.m, v.I_z, v.l_f, v.l_r, v.C_f, v.C_r))
    for t, x, y, psi, vx, vy, r in _floats(args.input, rows, cols):
        mpc.step(float(t), Pose2D(x, y, psi), (float(vx), float(vy), float(r)), path, prof)
    return TRACE_COLUMNS, mpc.trace


def cmd_replay(args) -> int:
    cfg = _scenario(args.scenario, args.seed, None, None)
    if not Path(args.input).is_file():
        raise InputError(f"--input: no such file {args.input}")
    fn = {"perception": _replay_perception, "localization": _replay_localization,
          "planner": _replay_planner, "mpc": _replay_mpc}[args.module]
    header, rows = fn(args, cfg)
    out = Path(args.out) if args.out else None
    if out is not None and out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    _write(out, header, rows)
    return 0


# --- calibrate ----------------------------------------------------------------

def cmd_calibrate(args) -> int:
    rows = _read_csv(args.pairs, ("x", "y", "u", "v"))
    data = _floats(args.pairs, rows, ("x", "y", "u", "v")) if rows else np.zeros((0, 4))
    try:
        fit = fit_projection(data[:, :2], data[:, 2:], args.degree)
    except RankDeficientError as exc:
        raise InputError(f"calibrate: {exc}") from None
    except ValueError as exc:
        raise InputError(f"--degree: {exc}") from None
    model = CameraModel(args.degree, fit.coeffs, args.s_u, args.s_v, (args.width, args.height), name=args.name)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        model.save(args.out)
    print(json.dumps({"degree": args.degree, "pairs": len(data), "rms_px": fit.rms, "model": args.out}))
    return 0


# --- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    try:
        paths = metrics_mod.write_report(args.log, args.out)
    except FileNotFoundError as exc:
        raise InputError(f"report: incomplete log directory: {exc}") from None
    rep = metrics_mod.report(args.log)
    print(json.dumps({"files": paths, "timing_modules": list(rep["timing"]),
                      "map_rms": rep["map_errors"]["rms"]}, default=str))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racestack", description="Autonomous racing stack simulator and tools.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a closed-loop scenario and write logs and metrics")
    r.add_argument("--scenario", help="scenario file (.json or .toml); defaults apply when omitted")
    r.add_argument("--track", help="fixture name or track JSON; overrides the scenario")
    r.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>-seed<seed> or ./runs/...)")
    r.add_argument("--seed", type=int)
    r.add_argument("--laps", type=int)
    r.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="feed recorded inputs through one module")
    p.add_argument("--module", required=True, choices=REPLAY_MODULES)
    p.add_argument("--input", required=True, help="input CSV")
    p.add_argument("--out", help="output CSV (stdout when omitted)")
    p.add_argument("--scenario", help="scenario file supplying module configs")
    p.add_argument("--seed", type=int)
    p.add_argument("--start", help="start pose x,y,psi for localization and planner")
    p.add_argument("--path", help="centreline CSV for the mpc module")
    p.set_defaults(func=cmd_replay)

    c = sub.add_parser("calibrate", help="fit the camera polynomial to ground/pixel pairs")
    c.add_argument("--pairs", required=True, help="CSV with columns x,y,u,v")
    c.add_argument("--degree", type=int, default=3)
    c.add_argument("--out", help="camera model JSON")
    c.add_argument("--s-u", dest="s_u", type=float, default=100.0, help="box width scale [px m]")
    c.add_argument("--s-v", dest="s_v", type=float, default=150.0, help="box height scale [px m]")
    c.add_argument("--width", type=int, default=640)
    c.add_argument("--height", type=int, default=480)
    c.add_argument("--name", default="cam")
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("report", help="emit gg, timing and map-error tables for a run directory")
    q.add_argument("--log", required=True, help="directory written by 'run'")
    q.add_argument("--out", help="output directory (defaults to the log directory)")
    q.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: scenario: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
