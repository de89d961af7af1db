"""Reference path and velocity target.

The path is the track centreline: midpoints of Delaunay edges joining a left
and a right cone, chained by a heading-gated greedy walk and resampled on a
uniform arc-length grid. The velocity target is a quasi-steady-state profile
bounded by a speed-dependent acceleration-limit (GGS) table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import splev, splprep
from scipy.spatial import Delaunay, QhullError

from .camera import ClassLabel
from .geometry import Pose2D, wrap_angle, wrap_angles

LEFT = ClassLabel.SMALL_BLUE
RIGHT = ClassLabel.SMALL_YELLOW
ORANGE = (ClassLabel.SMALL_ORANGE, ClassLabel.BIG_ORANGE)


@dataclass
class CenterlinePath:
    s: np.ndarray
    xy: np.ndarray
    heading: np.ndarray
    kappa: np.ndarray
    closed: bool = False
    reason: str = ""

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.heading = np.asarray(self.heading, dtype=float)
        self.kappa = np.asarray(self.kappa, dtype=float)

    @classmethod
    def empty(cls, reason: str) -> "CenterlinePath":
        z = np.zeros(0)
        return cls(z, np.zeros((0, 2)), z, z, False, reason)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def length(self) -> float:
        """Arc length covered (the full loop length for closed paths)."""
        if len(self.s) == 0:
            return 0.0
        if self.closed:
            return float(self.s[-1] + np.hypot(*(self.xy[0] - self.xy[-1])))
        return float(self.s[-1] - self.s[0])

    def project(self, p) -> float:
        """Arc length of the point on the path closest to ``p``."""
        p = np.asarray(p, dtype=float)
        xy = self.xy
        if len(xy) == 1:
            return float(self.s[0])
        a = xy
        b = np.roll(xy, -1, axis=0)
        sb = np.roll(self.s, -1)
        if self.closed:
            sb[-1] = self.length + self.s[0]
        else:
            a, b, sb = a[:-1], b[:-1], sb[:-1]
        ab = b - a
        L2 = np.maximum(np.sum(ab**2, axis=1), 1e-12)
        t = np.clip(np.sum((p - a) * ab, axis=1) / L2, 0.0, 1.0)
        q = a + t[:, None] * ab
        k = int(np.argmin(np.sum((q - p) ** 2, axis=1)))
        s_a = self.s[k]
        return float(s_a + t[k] * (sb[k] - s_a))

    def _wrap_s(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            return self.s[0] + np.mod(s - self.s[0], self.length)
        return np.clip(s, self.s[0], self.s[-1])

    def interpolate(self, s):
        """Position, heading and curvature at arc length(s) ``s`` (clamped / wrapped)."""
        s = self._wrap_s(s)
        if self.closed:
            ss = np.append(self.s, self.s[0] + self.length)
            xy = np.vstack([self.xy, self.xy[:1]])
            hd = np.unwrap(np.append(self.heading, self.heading[0]))
            kp = np.append(self.kappa, self.kappa[0])
        else:
            ss, xy, hd, kp = self.s, self.xy, np.unwrap(self.heading), self.kappa
        x = np.interp(s, ss, xy[:, 0])
        y = np.interp(s, ss, xy[:, 1])
        h = wrap_angles(np.interp(s, ss, hd))
        k = np.interp(s, ss, kp)
        return np.stack([x, y], axis=-1), h, k

    def window(self, s0: float, length: float) -> tuple["CenterlinePath", np.ndarray]:
        """Open sub-path from ``s0`` over ``length`` meters, plus the source sample indices."""
        n = len(self.s)
        if n == 0:
            return self, np.zeros(0, int)
        ds = self.length / n if self.closed else max((self.s[-1] - self.s[0]) / max(n - 1, 1), 1e-9)
        if self.closed:
            start = int(np.floor((s0 - self.s[0]) / ds)) % n
            count = min(int(math.ceil(length / ds)) + 1, n)
            idx = (start + np.arange(count)) % n
        else:
            start = int(np.clip(np.searchsorted(self.s, s0, side="right") - 1, 0, n - 1))
            stop = int(np.searchsorted(self.s, s0 + length, side="right"))
            idx = np.arange(start, max(stop, start + 1))
        sub_s = np.arange(len(idx)) * ds + (0.0 if self.closed else self.s[idx[0]])
        if self.closed:
            sub_s = sub_s + self.s[0] + start * ds
        return CenterlinePath(sub_s, self.xy[idx], self.heading[idx], self.kappa[idx], False), idx

    def to_rows(self, v=None):
        v = np.full(len(self.s), np.nan) if v is None else np.asarray(v)
        for i in range(len(self.s)):
            yield [self.s[i], self.xy[i, 0], self.xy[i, 1], self.heading[i], self.kappa[i], v[i]]


@dataclass
class VelocityProfile:
    v_target: np.ndarray

    def at(self, path: CenterlinePath, s: float) -> float:
        if len(self.v_target) == 0:
            return 0.0
        if path.closed:
            ss = np.append(path.s, path.s[0] + path.length)
            vv = np.append(self.v_target, self.v_target[0])
            s = path.s[0] + (s - path.s[0]) % path.length
            return float(np.interp(s, ss, vv))
        return float(np.interp(s, path.s, self.v_target))


@dataclass
class GgsMap:
    speeds: np.ndarray
    a_lat_max: np.ndarray
    a_accel_max: np.ndarray
    a_brake_max: np.ndarray
    v_cap: float

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=float)
        self.a_lat_max = np.asarray(self.a_lat_max, dtype=float)
        self.a_accel_max = np.asarray(self.a_accel_max, dtype=float)
        self.a_brake_max = np.asarray(self.a_brake_max, dtype=float)
        n = len(self.speeds)
        if not (len(self.a_lat_max) == len(self.a_accel_max) == len(self.a_brake_max) == n) or n == 0:
            raise ValueError("GGS tables must match the speed grid length")
        if np.any(np.diff(self.speeds) <= 0):
            raise ValueError("GGS speed grid must be strictly ascending")
        if min(self.a_lat_max.min(), self.a_accel_max.min(), self.a_brake_max.min()) <= 0:
            raise ValueError("GGS limits must be positive")
        if self.v_cap <= 0:
            raise ValueError("v_cap must be positive")

    def lat(self, v):
        return np.interp(v, self.speeds, self.a_lat_max)

    def accel(self, v):
        return np.interp(v, self.speeds, self.a_accel_max)

    def brake(self, v):
        return np.interp(v, self.speeds, self.a_brake_max)

    def scaled(self, factor: float) -> "GgsMap":
        return GgsMap(self.speeds, self.a_lat_max * factor, self.a_accel_max * factor,
                      self.a_brake_max * factor, self.v_cap)

    @classmethod
    def constant(cls, a_lat: float, a_accel: float, a_brake: float, v_cap: float) -> "GgsMap":
        sp = np.array([0.0, max(v_cap, 1.0) * 2])
        return cls(sp, [a_lat] * 2, [a_accel] * 2, [a_brake] * 2, v_cap)

    @classmethod
    def point_mass(cls, mu: float = 1.02, mass: float = 200.0, power: float = 40e3,
                   v_cap: float = 20.0, c_drag: float = 0.6, g: float = 9.81,
                   n: int = 41) -> "GgsMap":
        """Tables from a friction-limited point mass with a power cap and quadratic drag."""
        v = np.linspace(0.0, v_cap * 1.2, n)
        grip = mu * g
        drag = c_drag * v**2 / mass
        a_acc = np.minimum(grip, power / (mass * np.maximum(v, 1.0))) - drag
        a_acc = np.maximum(a_acc, 0.05)
        a_brk = grip + drag
        return cls(v, np.full(n, grip), a_acc, a_brk, v_cap)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["v", "a_lat_max", "a_accel_max", "a_brake_max"])
            for row in zip(self.speeds, self.a_lat_max, self.a_accel_max, self.a_brake_max):
                w.writerow([f"{x:.9g}" for x in row])

    @classmethod
    def load_csv(cls, path: str | Path, v_cap: float | None = None) -> "GgsMap":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty GGS table")
        missing = [c for c in ("v", "a_lat_max", "a_accel_max", "a_brake_max") if c not in rows[0]]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        col = lambda k: [float(r[k]) for r in rows]
        v = col("v")
        return cls(v, col("a_lat_max"), col("a_accel_max"), col("a_brake_max"), v_cap or max(v))


@dataclass(frozen=True)
class PlannerConfig:
    spacing: float = 0.5
    lookahead: float = 40.0
    heading_gate: float = math.radians(75.0)
    max_step: float = 6.0
    min_step: float = 0.25
    width_range: tuple[float, float] = (2.0, 6.0)
    smoothing: float = 0.05  # node jitter, m; spline smoothing is n * smoothing^2
    profile_scale: float = 0.82
    min_loop_length: float = 40.0
    close_gap: float = 16.0  # largest unmapped gap bridged when closing the loop


def centerline_nodes(positions, colors: Sequence[ClassLabel], cfg: PlannerConfig = PlannerConfig()) -> np.ndarray:
    """Midpoints of Delaunay edges joining differently coloured boundaries."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 2)
    side = np.array([1 if c == LEFT else (-1 if c == RIGHT else (0 if c in ORANGE else 9)) for c in colors])
    use = side != 9
    pts, side = pts[use], side[use]
    if len(pts) < 3:
        return np.zeros((0, 2))
    side = _orange_sides(pts, side, cfg.width_range[1])
    try:
        tri = Delaunay(pts)
    except (QhullError, ValueError):
        return np.zeros((0, 2))
    s = tri.simplices
    edges = np.vstack([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    a, b = edges[:, 0], edges[:, 1]
    # left-right pairs, or any pair with an orange cone (start/finish markers)
    keep = (side[a] * side[b] == -1) | ((side[a] == 0) ^ (side[b] == 0)) | ((side[a] == 0) & (side[b] == 0))
    L = np.hypot(*(pts[a] - pts[b]).T)
    keep &= (L >= cfg.width_range[0]) & (L <= cfg.width_range[1])
    mids = 0.5 * (pts[a[keep]] + pts[b[keep]])
    if len(mids) < 2:
        return mids
    # dedupe coincident midpoints
    order = np.lexsort((mids[:, 1], mids[:, 0]))
    mids = mids[order]
    out = [mids[0]]
    for m in mids[1:]:
        if np.min(np.sum((np.array(out) - m) ** 2, axis=1)) > 0.01:
            out.append(m)
    return np.array(out)


def _orange_sides(pts: np.ndarray, side: np.ndarray, radius: float) -> np.ndarray:
    """Give an orange cone the side of a boundary it sits on.

    An orange cone lies on a boundary when two cones of that side flank it,
    one ahead and one behind. Otherwise it stays side-less (0).
    """
    side = side.copy()
    for i in np.flatnonzero(side == 0):
        d = pts - pts[i]
        dist = np.hypot(d[:, 0], d[:, 1])
        for sd in (1, -1):
            near = np.flatnonzero((side == sd) & (dist > 1e-6) & (dist <= radius))
            if len(near) < 2:
                continue
            u = d[near] / dist[near, None]
            if np.min(u @ u.T) < -0.8:
                side[i] = sd
                break
    return side


def walk_nodes(nodes: np.ndarray, start, heading: float, max_length: float,
               cfg: PlannerConfig = PlannerConfig(), try_close: bool = False):
    """Greedy forward walk: nearest unvisited node within the heading gate.

    Returns ``(chain, closed)``; ``closed`` is only set with ``try_close`` when
    the walk comes back to its first node after ``cfg.min_loop_length``. A
    closing walk may bridge one gap of up to ``cfg.close_gap`` (a narrower
    heading gate applies to that step), including the final step back to the
    first node.
    """
    if len(nodes) == 0:
        return np.zeros((0, 2)), False
    visited = np.zeros(len(nodes), bool)
    cur = np.asarray(start, dtype=float)
    hd = heading
    chain = []
    length = 0.0
    bridged = False
    while length < max_length:
        d = nodes - cur
        dist = np.hypot(d[:, 0], d[:, 1])
        ang = np.abs(wrap_angles(np.arctan2(d[:, 1], d[:, 0]) - hd))
        visited |= dist < cfg.min_step
        ok = ~visited & (dist <= cfg.max_step) & (ang <= cfg.heading_gate)
        if try_close and len(chain) >= 3 and length >= cfg.min_loop_length:
            first = chain[0]
            df = first - cur
            dfirst = math.hypot(*df)
            if dfirst <= max(cfg.close_gap, cfg.max_step) and abs(wrap_angle(math.atan2(df[1], df[0]) - hd)) <= cfg.heading_gate:
                closer = ok & (dist < dfirst)
                if not closer.any():
                    return np.array(chain), True
        if not ok.any() and try_close and not bridged:
            # one unmapped stretch (typically behind the start pose) may be bridged
            ok = ~visited & (dist <= cfg.close_gap) & (ang <= 0.5 * cfg.heading_gate)
            bridged = bool(ok.any())
        if not ok.any():
            break
        k = int(np.flatnonzero(ok)[np.argmin(dist[ok])])
        visited[k] = True
        step = nodes[k] - cur
        if chain or try_close:
            length += math.hypot(*step)
        hd = math.atan2(step[1], step[0])
        cur = nodes[k]
        chain.append(cur)
    return np.array(chain).reshape(-1, 2), False


def resample(chain: np.ndarray, spacing: float = 0.5, closed: bool = False,
             smoothing: float = 0.05) -> CenterlinePath:
    """Smoothing-spline fit through the node chain, sampled every ``spacing`` meters.

    Heading and curvature come from centred finite differences of the samples.
    """
    chain = np.asarray(chain, dtype=float)
    if len(chain) < 2:
        return CenterlinePath.empty("fewer than two centreline nodes")
    n = len(chain)
    k = min(3, n - 1) if not closed else min(3, n - 1)
    if closed:
        pts = np.vstack([chain, chain[:1]])
    else:
        pts = chain
    seg = np.hypot(*np.diff(pts, axis=0).T)
    keep = np.concatenate([[True], seg > 1e-6])
    pts = pts[keep]
    if len(pts) < 2:
        return CenterlinePath.empty("degenerate centreline nodes")
    k = min(k, len(pts) - 1)
    try:
        tck, _ = splprep(pts.T, s=len(pts) * smoothing**2, k=k, per=int(closed))
        dense = np.array(splev(np.linspace(0, 1, max(200, 20 * len(pts))), tck)).T
    except (ValueError, TypeError):
        dense = pts
    dl = np.hypot(*np.diff(dense, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(dl)])
    total = cum[-1]
    if total < spacing:
        return CenterlinePath.empty("centreline shorter than one sample spacing")
    if closed:
        m = max(int(round(total / spacing)), 4)
        s = np.arange(m) * (total / m)
    else:
        s = np.arange(0.0, total + 1e-9, spacing)
    xy = np.stack([np.interp(s, cum, dense[:, 0]), np.interp(s, cum, dense[:, 1])], axis=1)
    heading, kappa = _heading_curvature(xy, s, closed, total)
    return CenterlinePath(s, xy, heading, kappa, closed)


def _heading_curvature(xy, s, closed, total):
    if closed:
        prev = np.roll(xy, 1, axis=0)
        nxt = np.roll(xy, -1, axis=0)
        d = nxt - prev
        heading = np.arctan2(d[:, 1], d[:, 0])
        uh = np.unwrap(heading)
        ds = total / len(s)
        dh = wrap_angles(np.roll(heading, -1) - np.roll(heading, 1))
        kappa = dh / (2 * ds)
        return wrap_angles(uh), kappa
    d = np.gradient(xy, s, axis=0)
    heading = np.arctan2(d[:, 1], d[:, 0])
    uh = np.unwrap(heading)
    kappa = np.gradient(uh, s) if len(s) > 1 else np.zeros(len(s))
    return wrap_angles(uh), kappa


def _prepend_start(chain: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Extend the chain backwards so it starts at the vehicle's projection."""
    if len(chain) < 2:
        return np.vstack([pos, chain])
    d = chain[1] - chain[0]
    d = d / max(np.hypot(*d), 1e-9)
    along = float(np.dot(pos - chain[0], d))
    if along < -0.5:
        return np.vstack([chain[0] + along * d, chain])
    return chain


def extract_centerline(lmap, pose: Pose2D, lookahead: float | None = None,
                       cfg: PlannerConfig = PlannerConfig()) -> CenterlinePath:
    """Open centreline ahead of ``pose`` from the confirmed landmarks of ``lmap``."""
    lookahead = cfg.lookahead if lookahead is None else lookahead
    pos = lmap.confirmed_positions() if hasattr(lmap, "confirmed_positions") else np.asarray([l.position for l in lmap])
    colors = lmap.confirmed_colors() if hasattr(lmap, "confirmed_colors") else [l.color for l in lmap]
    n_left = sum(c == LEFT for c in colors)
    n_right = sum(c == RIGHT for c in colors)
    if n_left < 2 or n_right < 2:
        return CenterlinePath.empty(f"need >= 2 blue and >= 2 yellow cones, have {n_left} blue / {n_right} yellow")
    nodes = centerline_nodes(pos, colors, cfg)
    chain, _ = walk_nodes(nodes, pose.position, pose.psi, lookahead, cfg)
    if len(chain) < 2:
        return CenterlinePath.empty("no centreline nodes ahead of the vehicle")
    chain = _prepend_start(chain, pose.position)
    path = resample(chain, cfg.spacing, False, cfg.smoothing)
    if len(path) and path.length > lookahead + cfg.spacing:
        path, _ = path.window(path.s[0], lookahead)
    return path


def close_centerline(lmap, pose: Pose2D, cfg: PlannerConfig = PlannerConfig()) -> CenterlinePath | None:
    """Full-lap closed centreline, or None while the map does not yet close the loop."""
    pos = lmap.confirmed_positions()
    colors = lmap.confirmed_colors()
    nodes = centerline_nodes(pos, colors, cfg)
    chain, closed = walk_nodes(nodes, pose.position, pose.psi, 1e6, cfg, try_close=True)
    if not closed:
        return None
    return resample(chain, cfg.spacing, True, cfg.smoothing)


def _passes(kappa, ds, ggs: GgsMap, v_start, v_end):
    n = len(kappa)
    ak = np.abs(kappa)
    vlat = np.full(n, ggs.v_cap)
    curved = ak > 1e-9
    for _ in range(30):
        lim = np.sqrt(ggs.lat(vlat[curved]) / ak[curved])
        new = np.minimum(ggs.v_cap, lim)
        if np.allclose(new, vlat[curved], rtol=0, atol=1e-12):
            vlat[curved] = new
            break
        vlat[curved] = new

    def coupling(i, v):
        ratio = ak[i] * v * v / float(ggs.lat(v))
        return math.sqrt(max(0.0, 1.0 - ratio * ratio))

    fwd = vlat.copy()
    if v_start is not None:
        fwd[0] = min(fwd[0], max(v_start, 0.0))
    for i in range(n - 1):
        v = fwd[i]
        a = float(ggs.accel(v)) * coupling(i, v)
        fwd[i + 1] = min(vlat[i + 1], math.sqrt(v * v + 2.0 * a * ds[i]))
    bwd = vlat.copy()
    if v_end is not None:
        bwd[-1] = min(bwd[-1], max(v_end, 0.0))
    for i in range(n - 2, -1, -1):
        v = bwd[i + 1]
        a = float(ggs.brake(v)) * coupling(i + 1, v)
        bwd[i] = min(vlat[i], math.sqrt(v * v + 2.0 * a * ds[i]))
    return vlat, fwd, bwd


def velocity_profile(path: CenterlinePath, ggs: GgsMap, v_now: float | None = None,
                     v_end: float | None = None) -> VelocityProfile:
    """Quasi-steady-state velocity target along ``path``.

    Curvature limit by fixed-point iteration, a forward pass from ``v_now``
    with friction-ellipse-coupled traction and a backward braking pass
    (ending at ``v_end`` when given); the pointwise minimum is returned.
    Closed paths without ``v_now`` are treated as periodic.
    """
    n = len(path)
    if n == 0:
        raise ValueError("velocity profile needs a non-empty path")
    if n == 1:
        return VelocityProfile(np.array([min(ggs.v_cap, v_now if v_now is not None else ggs.v_cap)]))
    if path.closed and v_now is None:
        ds = np.full(3 * n, path.length / n)
        kap = np.tile(path.kappa, 3)
        _, f, b = _passes(kap, ds, ggs, None, None)
        # a second sweep seeded from the first removes the boundary influence
        _, f, b = _passes(kap, ds, ggs, float(np.minimum(f, b)[n - 1]), float(np.minimum(f, b)[2 * n]))
        return VelocityProfile(np.minimum(f, b)[n:2 * n])
    ds = np.diff(path.s)
    _, f, b = _passes(path.kappa, ds, ggs, v_now, v_end)
    return VelocityProfile(np.minimum(f, b))


def write_path_csv(path_out: str | Path, path: CenterlinePath, profile: VelocityProfile | None = None) -> None:
    with open(path_out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "x", "y", "psi", "kappa", "v_target"])
        for row in path.to_rows(None if profile is None else profile.v_target):
            w.writerow([f"{x:.9g}" for x in row])


def read_path_csv(path_in: str | Path) -> tuple[CenterlinePath, VelocityProfile | None]:
    with open(path_in, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return CenterlinePath.empty("empty file"), None
    missing = [c for c in ("s", "x", "y", "psi", "kappa") if c not in rows[0]]
    if missing:
        raise ValueError(f"{path_in}: missing column(s) {', '.join(missing)}")
    col = lambda k: np.array([float(r[k]) for r in rows])
    path = CenterlinePath(col("s"), np.stack([col("x"), col("y")], 1), col("psi"), col("kappa"))
    prof = None
    if "v_target" in rows[0] and all(r["v_target"] not in ("", "nan") for r in rows):
        prof = VelocityProfile(col("v_target"))
    return path, prof
