import math

import numpy as np
import pytest
from scipy.stats import chi2

from oracles import central_jacobian, exhaustive_association
from racestack.camera import ClassLabel
from racestack.geometry import Pose2D, wrap_angle
from racestack.localization import (
    EkfState,
    LandmarkMap,
    OdometryInput,
    VehicleParams,
    correct,
    icnn_associate,
    jcbb_associate,
    nees,
    observation_jacobians,
    observe,
    predict,
    update_map,
)
from racestack.localization.association import JointCompatibility
from racestack.localization.ekf import (
    CovarianceError,
    motion_jacobian,
    motion_model,
    odometry_process_noise,
    read_odometry_csv,
)

VP = VehicleParams(0.2)
BLUE, YELLOW = ClassLabel.SMALL_BLUE, ClassLabel.SMALL_YELLOW


def test_predict_examples():
    s0 = EkfState(Pose2D(0, 0, 0), np.eye(3) * 0.01)
    s1 = predict(s0, OdometryInput(1, 1, 0), 1.0, VP, np.zeros((3, 3)))
    np.testing.assert_allclose(s1.mean, [2 * math.pi * 0.2, 0, 0], atol=1e-12)
    Q = np.diag([0.1, 0.2, 0.3])
    s2 = predict(s0, OdometryInput(0, 0, 0), 0.5, VP, Q)
    np.testing.assert_array_equal(s2.mean, s0.mean)
    np.testing.assert_allclose(s2.covariance, s0.covariance + Q)
    s3 = predict(EkfState(Pose2D(0, 0, math.pi / 2), np.eye(3)), OdometryInput(1, 1, 0), 1.0, VP, np.zeros((3, 3)))
    np.testing.assert_allclose(s3.mean[:2], [0, 2 * math.pi * 0.2], atol=1e-12)
    with pytest.raises(ValueError):
        predict(s0, OdometryInput(1, 1, 0), 0.0, VP, Q)
    with pytest.raises(CovarianceError):
        predict(s0, OdometryInput(1, 1, 0), 0.1, VP, -np.eye(3))


def test_predict_wraps_heading():
    s = predict(EkfState(Pose2D(0, 0, 3.1), np.eye(3)), OdometryInput(0, 0, 1.0), 0.1, VP, np.zeros((3, 3)))
    assert -math.pi < s.pose.psi <= math.pi and s.pose.psi == pytest.approx(wrap_angle(3.2))


def test_wheel_speed_units():
    rad = VehicleParams(0.2, "rad/s")
    s = predict(EkfState(Pose2D(0, 0, 0), np.eye(3)), OdometryInput(2 * math.pi, 2 * math.pi, 0), 1.0, rad, np.zeros((3, 3)))
    assert s.pose.x == pytest.approx(2 * math.pi * 0.2)
    with pytest.raises(ValueError):
        VehicleParams(0.0)


@pytest.mark.parametrize("pose,lm,expected", [
    ((0, 0, 0), (5, 0), (5, 0)),
    ((0, 0, math.pi / 2), (0, 5), (5, 0)),
    ((1, 1, 0), (1, 1), (0, 0)),
])
def test_observe_examples(pose, lm, expected):
    np.testing.assert_allclose(observe(Pose2D(*pose), [lm])[0], expected, atol=1e-12)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = np.array([*rng.uniform(-20, 20, 2), rng.uniform(-3, 3)])
        u = OdometryInput(*rng.uniform(0, 15, 2), rng.uniform(-1, 1))
        dt = rng.uniform(0.005, 0.05)
        F = motion_jacobian(x[2], u, dt, VP)
        Fn = central_jacobian(lambda v: motion_model(v, u, dt, VP), x)
        np.testing.assert_allclose(F, Fn, rtol=1e-6, atol=1e-9)
        lms = rng.uniform(-30, 30, (4, 2))
        H = observation_jacobians(Pose2D(*x), lms)
        for i, m in enumerate(lms):
            Hn = central_jacobian(lambda v: observe(Pose2D(v[0], v[1], v[2]), [m])[0], x)
            np.testing.assert_allclose(H[i], Hn, rtol=1e-6, atol=1e-6 * np.abs(Hn).max())


def test_correct_examples():
    P = np.diag([0.04, 0.09, 0.01])
    s = EkfState(Pose2D(1, 2, 0.3), P)
    lms = np.array([[5.0, 4.0], [8.0, -1.0]])
    z = observe(s.pose, lms)
    s1, ok = correct(s, z, [(0, 0), (1, 1)], lms, np.eye(2) * 0.01)
    assert ok
    np.testing.assert_allclose(s1.mean, s.mean, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(P - s1.covariance) >= -1e-12) and np.trace(s1.covariance) < np.trace(P)
    s2, ok = correct(s, z, [], lms, np.eye(2) * 0.01)
    assert s2 is s and not ok
    with pytest.raises(IndexError):
        correct(s, z, [(5, 0)], lms, np.eye(2))


def test_correct_hand_computed_gain():
    # landmark dead ahead; psi variance zero so only y couples to the lateral measurement
    p_y, r = 0.09, 0.01
    s = EkfState(Pose2D(0, 0, 0), np.diag([0.04, p_y, 0.0]))
    z = np.array([[10.0, 0.5]])
    s1, _ = correct(s, z, [(0, 0)], np.array([[10.0, 0.0]]), np.eye(2) * r)
    # h_y = -(y - y0) so dh/dy = -1: y+ = y - K*0.5, K = p_y / (p_y + r)
    k = p_y / (p_y + r)
    np.testing.assert_allclose(s1.mean, [0.0, -k * 0.5, 0.0], atol=1e-12)
    assert s1.covariance[1, 1] == pytest.approx(p_y * r / (p_y + r))


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(1)
    s = EkfState(Pose2D(0, 0, 0), np.eye(3) * 0.01)
    lms = rng.uniform(-30, 30, (20, 2))
    for i in range(10_000):
        u = OdometryInput(*rng.uniform(0, 20, 2), rng.uniform(-2, 2))
        dt = rng.uniform(0.001, 0.05)
        s = predict(s, u, dt, VP, odometry_process_noise(s.pose.psi, dt, VP, np.diag([1e-3, 1e-3, 1e-4])))
        if i % 5 == 0:
            idx = rng.choice(20, 3, replace=False)
            z = observe(s.pose, lms[idx]) + rng.normal(0, 0.1, (3, 2))
            s, _ = correct(s, z, list(enumerate(idx)), lms, np.eye(2) * rng.uniform(1e-4, 1.0))
        P = s.covariance
        assert np.max(np.abs(P - P.T)) <= 1e-9
        assert np.linalg.eigvalsh(P)[0] >= -1e-12


def run_nees_monte_carlo(n_runs=100, seed=0):
    """Average NEES per time step of an EKF lap around a landmark ring with known associations."""
    rng = np.random.default_rng(seed)
    dt, steps, radius, v = 0.01, 1300, 10.0, 5.0
    ang = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    lms = np.concatenate([np.stack([(radius + 2) * np.cos(ang), (radius + 2) * np.sin(ang)], 1),
                          np.stack([(radius - 2) * np.cos(ang), (radius - 2) * np.sin(ang)], 1)])
    sig_u = np.array([0.05, 0.05, 0.01])
    R = np.eye(2) * 0.1**2
    n_true = v / (2 * math.pi * VP.r_dyn)
    u_true = OdometryInput(n_true, n_true, v / radius)
    P0 = np.diag([0.05**2, 0.05**2, 0.01**2])
    nees_sum = np.zeros(steps)
    for _ in range(n_runs):
        x = np.array([radius, 0.0, math.pi / 2])
        est = EkfState(Pose2D(*(x + rng.multivariate_normal(np.zeros(3), P0))), P0)
        for k in range(steps):
            x = motion_model(x, u_true, dt, VP)
            x[2] = wrap_angle(x[2])
            u = OdometryInput(*(u_true.as_array() + rng.normal(0, sig_u)))
            Q = odometry_process_noise(est.pose.psi, dt, VP, np.diag(sig_u**2))
            est = predict(est, u, dt, VP, Q)
            if k % 5 == 4:
                truth = Pose2D(*x)
                vis = np.flatnonzero(np.hypot(*observe(truth, lms).T) < 12.0)
                z = observe(truth, lms[vis]) + rng.normal(0, 0.1, (len(vis), 2))
                est, _ = correct(est, z, [(i, int(j)) for i, j in enumerate(vis)], lms, R)
            nees_sum[k] += nees(est, x)
    return nees_sum / n_runs


def test_ekf_nees_consistency():
    n_runs = 100
    avg = run_nees_monte_carlo(n_runs)
    lo, hi = chi2.ppf([0.025, 0.975], 3 * n_runs) / n_runs
    assert lo <= avg.mean() <= hi
    assert np.mean((avg >= lo) & (avg <= hi)) >= 0.9


def _random_instance(rng, K, M):
    pose_true = Pose2D(0, 0, 0)
    lms = rng.uniform(-6, 6, (M, 2)) + [8, 0]
    P = np.diag(rng.uniform(0.01, 0.3, 3) ** 2)
    est = Pose2D(*rng.multivariate_normal([0, 0, 0], P))
    R = np.eye(2) * rng.uniform(0.05, 0.3) ** 2
    idx = rng.choice(M, size=min(K, M), replace=False)
    meas = observe(pose_true, lms[idx]) + rng.normal(0, 0.1, (len(idx), 2))
    if K > M:
        meas = np.vstack([meas, rng.uniform(-6, 6, (K - M, 2)) + [8, 0]])
    # occasional clutter replaces a real measurement
    if K and rng.random() < 0.3:
        meas[rng.integers(len(meas))] = rng.uniform(-6, 6, 2) + [8, 0]
    return observe(est, lms), meas, observation_jacobians(est, lms), P, R


def test_jcbb_matches_exhaustive_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(300):
        K, M = int(rng.integers(0, 4)), int(rng.integers(1, 5))
        pred, meas, H, P, R = _random_instance(rng, K, M)
        got = jcbb_associate(pred, meas, H, P, R)
        want, d = exhaustive_association(pred, meas, H, P, R)
        assert got.pairs == want
        assert got.joint_distance == pytest.approx(d, abs=1e-9)


def test_jcbb_empty_and_budget():
    assert jcbb_associate(np.zeros((3, 2)), np.zeros((0, 2)), np.zeros((3, 2, 3)), np.eye(3), np.eye(2)).pairs == []
    rng = np.random.default_rng(3)
    pred, meas, H, P, R = _random_instance(rng, 3, 4)
    res = jcbb_associate(pred, meas, H, P * 100, R, max_nodes=2)
    assert res.fallback


def test_icnn_examples():
    S = np.tile(np.eye(2) * 0.01, (2, 1, 1))
    res = icnn_associate([[5.0, 0.0]], [[5.0, 0.0]], S[:1])
    assert res.pairs == [(0, 0)]
    res = icnn_associate([[5.0, 0.0]], [[6.0, 0.0]], S[:1])
    assert res.pairs == [] and res.unmatched == [0]
    # two measurements, each equidistant from both landmarks
    pred = np.array([[5.0, 1.0], [5.0, -1.0]])
    meas = np.array([[5.1, 0.0], [4.9, 0.0]])
    res = icnn_associate(pred, meas, np.tile(np.eye(2), (2, 1, 1)))
    # exhaustive check: both one-to-one pairings have identical total distance
    d = np.array([[np.sum((m - p) ** 2) for p in pred] for m in meas])
    assert d[0, 0] + d[1, 1] == pytest.approx(d[0, 1] + d[1, 0])
    assert res.pairs == [(0, 0), (1, 1)]
    with pytest.raises(ValueError):
        icnn_associate(pred, meas, np.tile(np.eye(2), (2, 1, 1)), gate=1.5)


def stress_trial(rng, spacing=0.3):
    """A row of cones ``spacing`` apart; the believed pose is off by about one spacing along the row."""
    n = int(rng.integers(3, 7))
    ang = rng.uniform(-np.pi, np.pi)
    d = np.array([np.cos(ang), np.sin(ang)])
    base = np.array([6.0, 0.0]) + rng.normal(0, 1, 2)
    lms = base + np.outer(np.arange(n) * spacing, d)
    P = np.diag([0.3**2, 0.3**2, 0.005**2])
    R = np.eye(2) * 0.05**2
    err = d * spacing * rng.choice([-1, 1]) * rng.uniform(0.85, 1.15)
    est = Pose2D(*err, rng.normal(0, 0.003))
    meas = observe(Pose2D(0, 0, 0), lms) + rng.normal(0, 0.03, (n, 2))
    pred, H = observe(est, lms), observation_jacobians(est, lms)
    truth = [(i, i) for i in range(n)]
    jc = JointCompatibility(pred, meas, H, P, R)
    j = jcbb_associate(pred, meas, H, P, R)
    ic = icnn_associate(pred, meas, jc.individual_S())
    return j.pairs == truth, ic.pairs == truth


def test_jcbb_beats_icnn_on_dense_cones():
    rng = np.random.default_rng(4)
    res = np.array([stress_trial(rng) for _ in range(200)])
    assert res[:, 0].mean() >= 0.9
    assert res[:, 1].mean() < res[:, 0].mean()


def test_mapping_examples():
    m = LandmarkMap(n_confirm=2)
    m.update([((5.0, 0.0), BLUE)])
    assert len(m.landmarks) == 0 and len(m.candidates) == 1
    m.update([((5.1, 0.0), BLUE)])
    assert len(m.landmarks) == 1 and m.landmarks[0].color == BLUE
    assert m.landmarks[0].position == pytest.approx((5.05, 0.0))
    m2 = LandmarkMap(n_confirm=2)
    m2.update([((5.0, 0.0), BLUE), ((5.0, 0.05), YELLOW)])
    assert len(m2.landmarks) == 0
    assert m2.candidates[0].color_counts == {BLUE: 1, YELLOW: 1}


def test_unknown_labels_count_but_do_not_confirm():
    m = LandmarkMap(n_confirm=2)
    m.update([((1.0, 1.0), ClassLabel.UNKNOWN)] * 5)
    assert len(m.landmarks) == 0 and m.candidates[0].n == 5


def test_confirmed_positions_immutable():
    rng = np.random.default_rng(5)
    m = LandmarkMap(n_confirm=2)
    m.update([((3.0, 3.0), BLUE), ((3.0, 3.0), BLUE)])
    before = m.confirmed_positions().tobytes()
    for _ in range(50):
        m.update([(tuple(np.array([3.0, 3.0]) + rng.normal(0, 0.2, 2)), BLUE)])
        m.update([(tuple(rng.uniform(-20, 20, 2)), YELLOW)])
    assert m.confirmed_positions()[:1].tobytes() == before
    new = update_map(m, [((3.1, 3.0), BLUE)])
    assert new is not m and m.confirmed_positions()[:1].tobytes() == before


def test_map_json_roundtrip(tmp_path):
    m = LandmarkMap.from_cones([((1.0, 2.0), BLUE), ((3.0, 4.0), YELLOW)])
    m.save(tmp_path / "map.json")
    import json
    back = LandmarkMap.from_json(json.loads((tmp_path / "map.json").read_text()))
    assert back.to_json() == m.to_json()


def test_odometry_csv(tmp_path):
    (tmp_path / "o.csv").write_text("t,n_rl,n_rr,psi_dot\n0.0,1,1,0\n0.01,1,1.1,0.05\n")
    assert read_odometry_csv(tmp_path / "o.csv")[1] == OdometryInput(1.0, 1.1, 0.05, 0.01)
    (tmp_path / "bad.csv").write_text("t,n_rl\n0,1\n")
    with pytest.raises(ValueError, match="n_rr"):
        read_odometry_csv(tmp_path / "bad.csv")
