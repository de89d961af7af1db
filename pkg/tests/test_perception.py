import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racestack.geometry import RigidTransform3
from racestack.perception import (
    Cluster,
    PerceptionConfig,
    PointCloud,
    cluster_stats,
    dbscan,
    filter_neighborhood,
    filter_variance,
    merge_scans,
    neighborhood_counts,
    propose_landmarks,
    read_cloud_csv,
    write_cloud_csv,
)


def brute_force_dbscan(pts, eps, min_points):
    """Textbook O(n^2) region-query DBSCAN; border points join their nearest core point."""
    n = len(pts)
    if n == 0:
        return []
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    nb = d <= eps
    core = nb.sum(1) >= min_points
    label = -np.ones(n, int)
    cid = 0
    for s in range(n):
        if not core[s] or label[s] >= 0:
            continue
        label[s] = cid
        stack = [s]
        while stack:
            q = stack.pop()
            for r in np.flatnonzero(nb[q] & core):
                if label[r] < 0:
                    label[r] = cid
                    stack.append(r)
        cid += 1
    for p in np.flatnonzero(~core):
        cand = np.flatnonzero(nb[p] & core)
        if len(cand):
            label[p] = label[cand[np.lexsort((cand, d[p, cand]))[0]]]
    return [frozenset(np.flatnonzero(label == k).tolist()) for k in range(cid)]


def partition(clusters):
    return {frozenset(c.point_indices.tolist()) for c in clusters}


def test_merge_scans_examples():
    cloud = PointCloud(np.array([[1.0, 2, 3], [4, 5, 6]]))
    np.testing.assert_array_equal(merge_scans([cloud], [RigidTransform3()]).points, cloud.points)
    one = PointCloud(np.array([[1.0, 0, 0]]))
    assert len(merge_scans([one, one], [RigidTransform3(), RigidTransform3()])) == 2
    flipped = merge_scans([one], [RigidTransform3.from_yaw(np.pi)])
    np.testing.assert_allclose(flipped.points, [[-1, 0, 0]], atol=1e-15)
    with pytest.raises(ValueError):
        merge_scans([one, one], [RigidTransform3()])


def test_dbscan_examples():
    rng = np.random.default_rng(0)
    assert dbscan(PointCloud(np.zeros((0, 3))), 0.3, 3) == []
    a = rng.uniform(-0.05, 0.05, (5, 3))
    b = rng.uniform(-0.05, 0.05, (5, 3)) + [10, 0, 0]
    cl = dbscan(np.vstack([a, b]), 0.3, 3)
    assert sorted(len(c.point_indices) for c in cl) == [5, 5]
    assert dbscan(np.array([[0.0, 0, 0]]), 0.3, 3) == []


def test_dbscan_matches_brute_force_small():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(0, 300))
        pts = rng.uniform(0, 4, (n, 3)) * [1, 1, 0.2]
        eps = float(rng.uniform(0.1, 0.5))
        m = int(rng.integers(1, 6))
        assert partition(dbscan(pts, eps, m)) == set(brute_force_dbscan(pts, eps, m))


def test_dbscan_permutation_invariant():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 3, (400, 3)) * [1, 1, 0.1]
    perm = rng.permutation(len(pts))
    base = partition(dbscan(pts, 0.25, 4))
    permuted = {frozenset(perm[list(c)].tolist()) for c in partition(dbscan(pts[perm], 0.25, 4))}
    assert base == permuted


def test_cluster_stats_examples():
    pts = np.array([[0.0, 0, 0], [2, 0, 0]])
    s = cluster_stats(pts, [0, 1])
    np.testing.assert_allclose(s.centroid, [1, 0, 0])
    np.testing.assert_allclose(s.variance, [2, 0, 0])
    same = np.full((4, 3), 1.7)
    np.testing.assert_allclose(cluster_stats(same, range(4)).variance, 0.0, atol=1e-15)
    single = cluster_stats(pts, [1])
    assert single.singleton and np.all(single.variance == 0)


def test_cluster_stats_translation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pts = rng.normal(size=(10, 3))
        t = rng.normal(size=3) * 100
        a, b = cluster_stats(pts, range(10)), cluster_stats(pts + t, range(10))
        np.testing.assert_allclose(b.centroid, a.centroid + t, atol=1e-9)
        np.testing.assert_allclose(b.variance, a.variance, atol=1e-9)


def _cluster(centroid, variance=(0.001, 0.001, 0.001)):
    return Cluster(np.arange(3), np.asarray(centroid, float), np.asarray(variance, float))


def test_filter_variance_examples():
    lim = (0.01, 0.01, 0.02)
    assert len(filter_variance([_cluster((0, 0, 0), (0.001, 0.001, 0.005))], lim)) == 1
    assert filter_variance([_cluster((0, 0, 0), (0.5, 0.01, 0.01))], lim) == []
    assert filter_variance([], lim) == []


@pytest.mark.parametrize("x2,kept", [(3.5, 2), (1.0, 0), (0.3, 2)])
def test_filter_neighborhood_examples(x2, kept):
    cl = [_cluster((0, 0, 0)), _cluster((x2, 0, 0))]
    assert len(filter_neighborhood(cl, 0.25, 2.25)) == kept


def test_neighborhood_three_cluster_fixtures():
    # hand-counted |N(c, eps)| with self included
    cents = np.array([[0.0, 0, 0], [0.3, 0, 0], [1.2, 0, 0]])
    np.testing.assert_array_equal(neighborhood_counts(cents, 0.25), [2, 2, 1])
    np.testing.assert_array_equal(neighborhood_counts(cents, 2.25), [3, 3, 3])
    assert filter_neighborhood([_cluster(c) for c in cents], 0.25, 2.25) == []
    cents = np.array([[0.0, 0, 0], [0.3, 0, 0], [5.0, 0, 0]])
    np.testing.assert_array_equal(neighborhood_counts(cents, 0.25), [2, 2, 1])
    np.testing.assert_array_equal(neighborhood_counts(cents, 2.25), [2, 2, 1])
    assert len(filter_neighborhood([_cluster(c) for c in cents], 0.25, 2.25)) == 3


def _blob(rng, center, n=40, r=0.1, h=0.3):
    return np.column_stack([rng.normal(center[0], r / 2, n), rng.normal(center[1], r / 2, n), rng.uniform(0, h, n)])


def test_propose_landmarks_examples():
    rng = np.random.default_rng(4)
    cloud = PointCloud(np.vstack([_blob(rng, (5, 0)), _blob(rng, (5, 3.5))]))
    props = sorted(propose_landmarks(cloud), key=lambda p: p.position[1])
    assert len(props) == 2
    np.testing.assert_allclose(props[0].position, (5, 0), atol=0.05)
    np.testing.assert_allclose(props[1].position, (5, 3.5), atol=0.05)
    g = np.stack(np.meshgrid(np.arange(0, 20, 1.0), np.arange(-10, 10, 1.0)), -1).reshape(-1, 2)
    assert propose_landmarks(PointCloud(np.column_stack([g, np.zeros(len(g))]))) == []
    wall = np.column_stack([rng.uniform(3, 6, 600), rng.uniform(-0.05, 0.05, 600), rng.uniform(0, 1, 600)])
    assert propose_landmarks(PointCloud(wall)) == []


def test_propose_landmarks_respects_filters_when_rechecked():
    rng = np.random.default_rng(5)
    cfg = PerceptionConfig()
    for _ in range(10):
        centers = rng.uniform(-20, 20, (8, 2))
        pts = np.vstack([_blob(rng, c) for c in centers] + [rng.uniform(-20, 20, (100, 3)) * [1, 1, 0]])
        props = propose_landmarks(PointCloud(pts), cfg)
        clusters = dbscan(pts, cfg.dbscan_eps, cfg.dbscan_min_points)
        assert len(props) <= len(clusters) <= len(pts)
        kept = filter_neighborhood(filter_variance(clusters, cfg.max_variance), cfg.eps1, cfg.eps2)
        xy = np.array([c.centroid[:2] for c in kept]).reshape(-1, 2)
        for p in props:
            # each proposal lies within eps1 of a cluster that passes both filters
            assert np.min(np.sum((xy - p.position) ** 2, axis=1)) < cfg.eps1


def test_propose_landmarks_max_range():
    rng = np.random.default_rng(6)
    cloud = PointCloud(np.vstack([_blob(rng, (41.5, 0)), _blob(rng, (43.0, 10))]))
    props = propose_landmarks(cloud, PerceptionConfig(max_range=42.0))
    assert len(props) == 1 and props[0].position[0] == pytest.approx(41.5, abs=0.05)


def test_perception_config_validation():
    with pytest.raises(ValueError):
        PerceptionConfig(eps1=2.0, eps2=1.0)
    with pytest.raises(ValueError):
        PerceptionConfig(max_range=0.0)


def test_cloud_csv_roundtrip(tmp_path):
    pts = np.random.default_rng(7).normal(size=(10, 3))
    write_cloud_csv(tmp_path / "c.csv", PointCloud(pts))
    clouds = read_cloud_csv(tmp_path / "c.csv")
    assert len(clouds) == 1
    np.testing.assert_allclose(clouds[0].points, pts)
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ValueError, match="z"):
        read_cloud_csv(tmp_path / "bad.csv")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dbscan_property_random_seeds(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 2, (int(rng.integers(1, 120)), 3))
    assert partition(dbscan(pts, 0.3, 3)) == set(brute_force_dbscan(pts, 0.3, 3))
