"""Cone tracks: generation from a centreline, bundled fixtures and JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import splev, splprep

from ..camera import ClassLabel
from ..geometry import Pose2D

PHYSICAL = (ClassLabel.SMALL_BLUE, ClassLabel.SMALL_YELLOW, ClassLabel.SMALL_ORANGE, ClassLabel.BIG_ORANGE)


@dataclass
class TrackDefinition:
    cones: list[tuple[tuple[float, float], ClassLabel]]
    start_pose: Pose2D
    width_range: tuple[float, float] = (2.0, 5.0)
    name: str = "track"
    closed: bool = True
    centerline: np.ndarray | None = None  # ground-truth centreline polyline
    left: np.ndarray | None = None  # boundary polylines (blue / yellow side)
    right: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cones) < 4:
            raise ValueError("a track needs at least 4 cones")
        for p, c in self.cones:
            if c not in PHYSICAL:
                raise ValueError(f"cone colour {c!r} is not a physical cone class")
        if self.centerline is not None:
            self.centerline = np.asarray(self.centerline, dtype=float)
        self._xy = np.array([p for p, _ in self.cones], dtype=float)

    @property
    def cone_xy(self) -> np.ndarray:
        return self._xy

    @property
    def cone_colors(self) -> list[ClassLabel]:
        return [c for _, c in self.cones]

    @property
    def length(self) -> float:
        cl = self.centerline
        if cl is None:
            return float("nan")
        seg = np.hypot(*np.diff(cl, axis=0).T).sum()
        if self.closed:
            seg += float(np.hypot(*(cl[0] - cl[-1])))
        return float(seg)

    def boundary_segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Segments (a, b) of both boundary polylines, used for divergence checks."""
        segs_a, segs_b = [], []
        for poly in (self.left, self.right):
            if poly is None or len(poly) < 2:
                continue
            pts = np.vstack([poly, poly[:1]]) if self.closed else poly
            segs_a.append(pts[:-1])
            segs_b.append(pts[1:])
        if not segs_a:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.vstack(segs_a), np.vstack(segs_b)

    def to_json(self) -> dict:
        d = {
            "name": self.name,
            "closed": self.closed,
            "cones": [{"x": p[0], "y": p[1], "color": c.value} for p, c in self.cones],
            "start": {"x": self.start_pose.x, "y": self.start_pose.y, "psi": self.start_pose.psi},
        }
        for key in ("centerline", "left", "right"):
            val = getattr(self, key)
            if val is not None:
                d[key] = np.asarray(val).tolist()
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, d: dict) -> "TrackDefinition":
        try:
            cones = [((float(c["x"]), float(c["y"])), ClassLabel(c["color"])) for c in d["cones"]]
            st = d["start"]
            start = Pose2D(float(st["x"]), float(st["y"]), float(st.get("psi", 0.0)))
        except KeyError as exc:
            raise ValueError(f"track file is missing field {exc}") from None
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)
        left, right = arr("left"), arr("right")
        if left is None:
            left, right = _polylines_from_cones(cones)
        return cls(cones, start, name=d.get("name", "track"), closed=bool(d.get("closed", True)),
                   centerline=arr("centerline"), left=left, right=right)

    @classmethod
    def load(cls, path: str | Path) -> "TrackDefinition":
        return cls.from_json(json.loads(Path(path).read_text()))


def _polylines_from_cones(cones):
    # cones are stored in driving order per side by the generator
    left = np.array([p for p, c in cones if c == ClassLabel.SMALL_BLUE]).reshape(-1, 2)
    right = np.array([p for p, c in cones if c == ClassLabel.SMALL_YELLOW]).reshape(-1, 2)
    return left, right


def _dense_centerline(ctrl: np.ndarray, closed: bool, step: float = 0.1) -> np.ndarray:
    pts = np.vstack([ctrl, ctrl[:1]]) if closed else ctrl
    tck, _ = splprep(pts.T, s=0.0, k=3, per=int(closed))
    u = np.linspace(0, 1, 20000)
    dense = np.array(splev(u, tck)).T
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(dense, axis=0).T))])
    total = cum[-1]
    n = int(total / step)
    s = np.linspace(0.0, total, n, endpoint=not closed)
    return np.stack([np.interp(s, cum, dense[:, 0]), np.interp(s, cum, dense[:, 1])], axis=1)


def _normals(line: np.ndarray, closed: bool) -> np.ndarray:
    if closed:
        d = np.roll(line, -1, axis=0) - np.roll(line, 1, axis=0)
    else:
        d = np.gradient(line, axis=0)
    d /= np.hypot(d[:, 0], d[:, 1])[:, None]
    return np.stack([-d[:, 1], d[:, 0]], axis=1)


def _place(boundary: np.ndarray, spacing: float, closed: bool) -> np.ndarray:
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(boundary, axis=0).T))])
    total = cum[-1]
    if closed:
        total += float(np.hypot(*(boundary[0] - boundary[-1])))
        n = max(int(round(total / spacing)), 3)
        s = np.arange(n) * total / n
        b = np.vstack([boundary, boundary[:1]])
        cum = np.append(cum, total)
    else:
        n = max(int(round(total / spacing)), 1)
        s = np.linspace(0.0, total, n + 1)
        b = boundary
    return np.stack([np.interp(s, cum, b[:, 0]), np.interp(s, cum, b[:, 1])], axis=1)


def from_centerline(ctrl, closed: bool = True, half_width: float = 1.5, spacing: float = 3.0,
                    name: str = "track", start_orange: bool = True) -> TrackDefinition:
    """Track with blue cones left and yellow cones right of a spline centreline.

    The start pose sits on the first control point facing along the line; big
    orange cones replace the two cones nearest the start line.
    """
    ctrl = np.asarray(ctrl, dtype=float)
    line = _dense_centerline(ctrl, closed)
    nrm = _normals(line, closed)
    left_b = line + half_width * nrm
    right_b = line - half_width * nrm
    left = _place(left_b, spacing, closed)
    right = _place(right_b, spacing, closed)
    cones = [((float(x), float(y)), ClassLabel.SMALL_BLUE) for x, y in left]
    cones += [((float(x), float(y)), ClassLabel.SMALL_YELLOW) for x, y in right]
    d = line[1] - line[0]
    start = Pose2D(float(line[0, 0]), float(line[0, 1]), math.atan2(d[1], d[0]))
    if start_orange:
        xy = np.array([p for p, _ in cones])
        for side in (ClassLabel.SMALL_BLUE, ClassLabel.SMALL_YELLOW):
            idx = [i for i, (_, c) in enumerate(cones) if c == side]
            k = idx[int(np.argmin(np.sum((xy[idx] - line[0]) ** 2, axis=1)))]
            cones[k] = (cones[k][0], ClassLabel.BIG_ORANGE)
    return TrackDefinition(cones, start, (2 * half_width - 0.5, 2 * half_width + 0.5), name, closed,
                           line, left_b, right_b)


def oval(straight: float = 40.0, radius: float = 15.0, **kw) -> TrackDefinition:
    """Two straights joined by semicircles, driven counterclockwise."""
    pts = []
    h = straight / 2
    for x in np.linspace(-h, h, 5)[:-1]:
        pts.append((x, -radius))
    for a in np.linspace(-math.pi / 2, math.pi / 2, 7)[:-1]:
        pts.append((h + radius * math.cos(a), radius * math.sin(a)))
    for x in np.linspace(h, -h, 5)[:-1]:
        pts.append((x, radius))
    for a in np.linspace(math.pi / 2, 3 * math.pi / 2, 7)[:-1]:
        pts.append((-h + radius * math.cos(a), radius * math.sin(a)))
    return from_centerline(np.array(pts), True, name="oval", **kw)


# control points of a ~360 m autocross-style loop (counterclockwise)
FSG_CONTROL = np.array([
    [0.0, 0.0], [20.0, 0.0], [40.0, 0.0], [55.0, 3.0], [63.0, 12.0], [62.0, 24.0],
    [54.0, 32.0], [44.0, 36.0], [38.0, 45.0], [42.0, 56.0], [52.0, 62.0], [60.0, 72.0],
    [56.0, 83.0], [44.0, 86.0], [30.0, 80.0], [18.0, 72.0], [6.0, 74.0], [-6.0, 80.0],
    [-18.0, 78.0], [-24.0, 68.0], [-20.0, 56.0], [-10.0, 48.0], [-12.0, 36.0],
    [-24.0, 28.0], [-30.0, 16.0], [-24.0, 4.0], [-12.0, 0.0],
])


def fsg_like(**kw) -> TrackDefinition:
    return from_centerline(FSG_CONTROL, True, name="fsg_like", **kw)


def circle(radius: float = 20.0, **kw) -> TrackDefinition:
    a = np.linspace(-math.pi / 2, 1.5 * math.pi, 17)[:-1]
    pts = np.stack([radius * np.cos(a), radius * np.sin(a) + radius], axis=1)
    return from_centerline(pts, True, name="circle", **kw)


def straight_corridor(length: float = 80.0, **kw) -> TrackDefinition:
    pts = np.stack([np.linspace(0.0, length, 9), np.zeros(9)], axis=1)
    return from_centerline(pts, False, name="corridor", start_orange=False, **kw)


FIXTURES = {"oval": oval, "fsg_like": fsg_like, "circle": circle, "corridor": straight_corridor}


def load_track(name_or_path: str) -> TrackDefinition:
    if name_or_path in FIXTURES:
        return FIXTURES[name_or_path]()
    return TrackDefinition.load(name_or_path)
