"""Lidar landmark proposals: density clustering plus geometric filters."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import RigidTransform3

log = logging.getLogger(__name__)


@dataclass
class PointCloud:
    points: np.ndarray
    frame_id: str = "vehicle"
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


@dataclass
class Cluster:
    point_indices: np.ndarray
    centroid: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class LandmarkProposal:
    position: tuple[float, float]
    support: int
    timestamp: float = 0.0


@dataclass(frozen=True)
class PerceptionConfig:
    dbscan_eps: float = 0.3
    dbscan_min_points: int = 3
    max_variance: tuple[float, float, float] = (0.05, 0.05, 0.05)
    eps1: float = 0.25  # m^2
    eps2: float = 2.25  # m^2
    max_range: float = 42.0

    def __post_init__(self):
        if self.dbscan_eps <= 0 or self.dbscan_min_points < 1:
            raise ValueError("dbscan_eps must be > 0 and dbscan_min_points >= 1")
        if not (0.0 < self.eps1 < self.eps2):
            raise ValueError("need 0 < eps1 < eps2")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if min(self.max_variance) <= 0:
            raise ValueError("max_variance must be positive in every axis")


class ClusterStats(NamedTuple):
    centroid: np.ndarray
    variance: np.ndarray
    singleton: bool


def merge_scans(scans: Sequence[PointCloud], extrinsics: Sequence[RigidTransform3]) -> PointCloud:
    """Bring every scan into the vehicle frame and concatenate them."""
    if len(scans) != len(extrinsics):
        raise ValueError(f"{len(scans)} scans but {len(extrinsics)} extrinsics")
    if not scans:
        return PointCloud(np.zeros((0, 3)))
    parts = [tf.apply(s.points) for s, tf in zip(scans, extrinsics)]
    return PointCloud(np.vstack(parts), "vehicle", max(s.timestamp for s in scans))


def dbscan(cloud: PointCloud | np.ndarray, eps: float, min_points: int) -> list[Cluster]:
    """Density-based clustering.

    A point is core when at least ``min_points`` points (itself included) lie
    within ``eps``. Clusters are the connected components of core points;
    a border point joins the cluster of its nearest core neighbour, which keeps
    the result independent of input order. Everything else is noise.
    """
    if eps <= 0 or min_points < 1:
        raise ValueError("eps must be > 0 and min_points >= 1")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    n = len(pts)
    if n == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
    degree = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = degree >= min_points
    if not core.any():
        return []

    both = core[i] & core[j]
    graph = coo_matrix((np.ones(both.sum()), (i[both], j[both])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    labels = np.full(n, -1)
    labels[core] = comp[core]

    # border points: nearest core neighbour wins
    a = np.concatenate([i, j])
    b = np.concatenate([j, i])
    sel = ~core[a] & core[b]
    if sel.any():
        a, b = a[sel], b[sel]
        d2 = np.sum((pts[a] - pts[b]) ** 2, axis=1)
        order = np.lexsort((b, d2, a))
        a, b = a[order], b[order]
        first = np.ones(len(a), bool)
        first[1:] = a[1:] != a[:-1]
        labels[a[first]] = labels[b[first]]

    clusters = []
    for lab in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == lab)
        st = cluster_stats(pts, idx)
        clusters.append(Cluster(idx, st.centroid, st.variance))
    # order by smallest member index
    clusters.sort(key=lambda c: int(c.point_indices[0]))
    return clusters


def cluster_stats(cloud: PointCloud | np.ndarray, indices) -> ClusterStats:
    """Centroid and Bessel-corrected per-axis variance of a point subset."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        raise ValueError("cluster_stats needs at least one point")
    sub = pts[idx]
    mu = sub.mean(axis=0)
    if len(sub) < 2:
        return ClusterStats(mu, np.zeros(3), True)
    var = np.sum((sub - mu) ** 2, axis=0) / (len(sub) - 1)
    return ClusterStats(mu, var, False)


def filter_variance(clusters: Sequence[Cluster], max_variance) -> list[Cluster]:
    lim = np.asarray(max_variance, dtype=float)
    if np.any(lim <= 0):
        raise ValueError("max_variance must be positive")
    return [c for c in clusters if np.all(c.variance <= lim)]


def neighborhood_counts(centroids: np.ndarray, eps: float) -> np.ndarray:
    """|N(c, eps)| for every centroid; squared distances compared to ``eps`` (m^2), self included."""
    c = np.asarray(centroids, dtype=float)
    d2 = np.sum((c[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    return np.sum(d2 < eps, axis=1)


def filter_neighborhood(clusters: Sequence[Cluster], eps1: float, eps2: float) -> list[Cluster]:
    """Keep clusters with no other cluster in the ring between the two radii."""
    if not (0.0 < eps1 < eps2):
        raise ValueError("need 0 < eps1 < eps2")
    if not clusters:
        return []
    cents = np.array([c.centroid for c in clusters])
    keep = neighborhood_counts(cents, eps1) == neighborhood_counts(cents, eps2)
    return [c for c, k in zip(clusters, keep) if k]


def _merge_close(xy: np.ndarray, support: np.ndarray, eps1: float):
    """Support-weighted merge of centroids closer than sqrt(eps1)."""
    if len(xy) < 2:
        return xy, support
    d2 = np.sum((xy[:, None] - xy[None]) ** 2, axis=-1)
    _, comp = connected_components(coo_matrix(d2 < eps1), directed=False)
    out_xy, out_n = [], []
    for k in range(comp.max() + 1):
        m = comp == k
        w = support[m].astype(float)
        out_xy.append((xy[m] * w[:, None]).sum(axis=0) / w.sum())
        out_n.append(int(support[m].sum()))
    return np.array(out_xy), np.array(out_n)


def propose_landmarks(cloud: PointCloud, cfg: PerceptionConfig = PerceptionConfig()) -> list[LandmarkProposal]:
    pts = cloud.points
    if len(pts):
        pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= cfg.max_range]
    clusters = dbscan(pts, cfg.dbscan_eps, cfg.dbscan_min_points)
    clusters = filter_variance(clusters, cfg.max_variance)
    clusters = filter_neighborhood(clusters, cfg.eps1, cfg.eps2)
    if not clusters:
        return []
    xy = np.array([c.centroid[:2] for c in clusters])
    support = np.array([len(c.point_indices) for c in clusters])
    xy, support = _merge_close(xy, support, cfg.eps1)
    return [
        LandmarkProposal((float(p[0]), float(p[1])), int(n), cloud.timestamp)
        for p, n in zip(xy, support)
    ]


def read_cloud_csv(path: str | Path) -> list[PointCloud]:
    """Read a point cloud CSV (columns x,y,z; optional frame, t).

    Returns one cloud per distinct ``frame`` value, in order of appearance.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if not cols and not rows:
        return []
    missing = [c for c in ("x", "y", "z") if c not in cols]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}; expected x,y,z")
    frames: dict[str, list] = {}
    stamps: dict[str, float] = {}
    for lineno, row in enumerate(rows, start=2):
        key = row.get("frame", "0") or "0"
        try:
            p = [float(row[c]) for c in ("x", "y", "z")]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: bad value in x/y/z ({exc})") from None
        frames.setdefault(key, []).append(p)
        if "t" in row and row["t"] not in (None, ""):
            stamps[key] = float(row["t"])
    return [PointCloud(np.array(v), "vehicle", stamps.get(k, 0.0)) for k, v in frames.items()]


def write_cloud_csv(path: str | Path, cloud: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        w.writerows(cloud.points.tolist())
