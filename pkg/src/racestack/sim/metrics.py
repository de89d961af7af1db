"""Run metrics and the CSV/JSON files written for a closed-loop run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..camera import ClassLabel
from .loop import TRACE_FIELDS, ScenarioLog

TIMING_MODULES = ("clustering", "perception", "camera", "localization", "planning", "control", "mpc", "pipeline")
# files every completed run directory holds; report checks for them
RUN_FILES = ("metrics.json", "trace.csv", "gg.csv", "map.csv", "timing.csv", "map_completion.csv", "cones.json")


def lateral_acceleration(trace: dict) -> np.ndarray:
    """Body-frame lateral acceleration ``v_y' + v_x r`` as logged by the harness."""
    return np.asarray(trace.get("a_y", []), dtype=float)


def _peak(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if len(a) else 0.0


def _percentiles(a: np.ndarray, qs=(50, 90, 95, 99)) -> dict:
    if len(a) == 0:
        return {f"p{q}": 0.0 for q in qs}
    return {f"p{q}": float(np.percentile(np.abs(a), q)) for q in qs}


def timing_quantiles(samples) -> dict:
    """Median, quartiles and 1.5 IQR whiskers (clipped to the data) in milliseconds."""
    x = np.asarray(samples, dtype=float) * 1e3
    if len(x) == 0:
        return {}
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo = float(x[x >= q1 - 1.5 * iqr].min())
    hi = float(x[x <= q3 + 1.5 * iqr].max())
    return {"n": int(len(x)), "median": float(med), "q1": float(q1), "q3": float(q3),
            "whisker_lo": lo, "whisker_hi": hi, "max": float(x.max())}


def map_errors(map_rows: list[dict], cones: list[dict], gate: float = 1.0) -> dict:
    """Mapped landmarks against the ground-truth cones.

    Each landmark is paired with its nearest true cone; pairs further than
    ``gate`` count as spurious. Colour errors count pairs whose class differs.
    """
    if not map_rows or not cones:
        return {"n_mapped": len(map_rows), "n_true": len(cones), "rms": float("nan"),
                "max": float("nan"), "spurious": 0, "color_errors": 0, "rows": []}
    true_xy = np.array([[c["x"], c["y"]] for c in cones])
    xy = np.array([[m["x"], m["y"]] for m in map_rows])
    d, j = cKDTree(true_xy).query(xy)
    ok = d <= gate
    color_err = sum(1 for i in np.flatnonzero(ok) if map_rows[i]["color"] != cones[j[i]]["color"])
    rows = [{"x": float(xy[i, 0]), "y": float(xy[i, 1]), "color": map_rows[i]["color"],
             "true_x": float(true_xy[j[i], 0]), "true_y": float(true_xy[j[i], 1]),
             "true_color": cones[j[i]]["color"], "error": float(d[i])} for i in range(len(xy))]
    return {
        "n_mapped": len(map_rows),
        "n_true": len(cones),
        "rms": float(np.sqrt(np.mean(d[ok] ** 2))) if ok.any() else float("nan"),
        "max": float(d[ok].max()) if ok.any() else float("nan"),
        "spurious": int((~ok).sum()),
        "color_errors": int(color_err),
        "rows": rows,
    }


def compute_metrics(log: ScenarioLog) -> dict:
    """Deterministic summary of a run (wall-clock timings are kept separate)."""
    tr = log.arrays()
    a_y = lateral_acceleration(log.trace)
    a_x = tr.get("a_x", np.zeros(0))
    v = tr.get("v_x", np.zeros(0))
    off = tr.get("lateral_offset", np.zeros(0))
    released = tr["t"] >= log.release_time if len(tr.get("t", [])) else np.zeros(0, bool)
    merr = map_errors(log.map_snapshot, log.cones)
    comp = log.map_completion
    return {
        "track": log.track_name,
        "track_length": log.track_length,
        "completed": bool(log.completed),
        "diverged": bool(log.diverged),
        "cause": log.cause,
        "release_time": log.release_time,
        "lap_times": [float(x) for x in log.lap_times],
        "total_time": float(sum(log.lap_times)),
        "closed_path_fraction": log.closed_path_progress,
        "peak_lateral_acceleration": _peak(a_y[released]) if len(a_y) else 0.0,
        "lateral_acceleration_percentiles": _percentiles(a_y[released]) if len(a_y) else _percentiles(a_y),
        "peak_longitudinal_acceleration": _peak(a_x[released]) if len(a_x) else 0.0,
        "longitudinal_acceleration_percentiles": _percentiles(a_x[released]) if len(a_x) else _percentiles(a_x),
        "max_speed": float(v.max()) if len(v) else 0.0,
        "mean_speed": float(v[released].mean()) if released.any() else 0.0,
        "max_abs_lateral_offset": float(np.abs(off[released]).max()) if released.any() else 0.0,
        "map_completion_final": float(comp[-1][1]) if comp else 0.0,
        "map": {k: merr[k] for k in ("n_mapped", "n_true", "rms", "max", "spurious", "color_errors")},
        "frames": len(log.frames),
    }


def timing_table(log: ScenarioLog) -> dict:
    """Per-module timing quantiles; modules that never ran are omitted."""
    return {m: timing_quantiles(log.timings[m]) for m in TIMING_MODULES if log.timings.get(m)}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(o):
    # JSON has no NaN; null keeps the file strict
    if isinstance(o, float) and not np.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in row])


def write_gg_csv(path: Path, log: ScenarioLog) -> None:
    tr = log.arrays()
    rows = zip(tr["t"].tolist(), tr["v_x"].tolist(), tr["a_x"].tolist(), tr["a_y"].tolist())
    _write_rows(path, ["t", "v", "a_x", "a_y"], rows)


def write_timing_csv(path: Path, table: dict) -> None:
    cols = ["module", "n", "median", "q1", "q3", "whisker_lo", "whisker_hi", "max"]
    _write_rows(path, cols, [[m] + [q[c] for c in cols[1:]] for m, q in table.items()])


def write_map_csv(path: Path, rows: list[dict]) -> None:
    cols = ["x", "y", "color", "true_x", "true_y", "true_color", "error"]
    _write_rows(path, cols, [[r[c] for c in cols] for r in rows])


def write_run(out_dir: str | Path, log: ScenarioLog, config_json: str | None = None) -> dict:
    """Write every log file of a run; returns the metrics record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = compute_metrics(log)
    (out / "metrics.json").write_text(json.dumps(_clean(metrics), indent=2, default=_json_default))
    tr = log.arrays()
    _write_rows(out / "trace.csv", TRACE_FIELDS, zip(*(tr[k].tolist() for k in TRACE_FIELDS)))
    write_gg_csv(out / "gg.csv", log)
    write_map_csv(out / "map.csv", map_errors(log.map_snapshot, log.cones)["rows"])
    write_timing_csv(out / "timing.csv", timing_table(log))
    _write_rows(out / "map_completion.csv", ["distance", "fraction"], log.map_completion)
    _write_rows(out / "mpc_trace.csv", ["t", "v_x", "du_1", "u_out", "cost", "residual", "truncated"], log.mpc_trace)
    _write_rows(out / "longitudinal.csv", ["t", "v_target", "v_meas", "force"], log.lon_trace)
    (out / "cones.json").write_text(json.dumps(log.cones))
    (out / "map.json").write_text(json.dumps(log.map_snapshot))
    if config_json is not None:
        (out / "config.json").write_text(config_json)
    return metrics


def read_run(log_dir: str | Path) -> dict:
    """Load the files of a run directory; raises FileNotFoundError listing what is missing."""
    d = Path(log_dir)
    missing = [f for f in RUN_FILES if not (d / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    return {
        "metrics": json.loads((d / "metrics.json").read_text()),
        "cones": json.loads((d / "cones.json").read_text()),
        "map": json.loads((d / "map.json").read_text()) if (d / "map.json").is_file() else [],
    }


def report(log_dir: str | Path) -> dict:
    """Gg scatter, timing table and map-error table of a finished run directory."""
    d = Path(log_dir)
    data = read_run(d)
    with open(d / "timing.csv") as fh:
        timing = {row["module"]: {k: float(v) for k, v in row.items() if k != "module"} for row in csv.DictReader(fh)}
    with open(d / "gg.csv") as fh:
        gg = [(float(r["v"]), float(r["a_x"]), float(r["a_y"])) for r in csv.DictReader(fh)]
    merr = map_errors(data["map"], data["cones"])
    return {"metrics": data["metrics"], "timing": timing, "gg": gg, "map_errors": merr}


def write_report(log_dir: str | Path, out_dir: str | Path | None = None) -> dict:
    """Write ``report_gg.csv``, ``report_timing.csv`` and ``report_map.csv``; returns file paths."""
    rep = report(log_dir)
    out = Path(out_dir or log_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"gg": out / "report_gg.csv", "timing": out / "report_timing.csv", "map": out / "report_map.csv"}
    _write_rows(paths["gg"], ["v", "a_x", "a_y"], rep["gg"])
    cols = ["n", "median", "q1", "q3", "whisker_lo", "whisker_hi", "max"]
    _write_rows(paths["timing"], ["module"] + cols, [[m] + [q[c] for c in cols] for m, q in rep["timing"].items()])
    write_map_csv(paths["map"], rep["map_errors"]["rows"])
    return {k: str(v) for k, v in paths.items()}


def physical_color(label: str) -> bool:
    return label in {c.value for c in (ClassLabel.SMALL_BLUE, ClassLabel.SMALL_YELLOW,
                                       ClassLabel.SMALL_ORANGE, ClassLabel.BIG_ORANGE)}
