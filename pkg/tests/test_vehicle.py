import math

import numpy as np
import pytest

from racestack.camera import ClassLabel
from racestack.geometry import Pose2D
from racestack.longitudinal import PiConfig, PiState, pi_step
from racestack.mpc import BicycleParams
from racestack.sim.sensors import (
    LatencyModel,
    LidarConfig,
    OdometryConfig,
    simulate_lidar,
    simulate_odometry,
)
from racestack.sim.tracks import TrackDefinition, circle, fsg_like, load_track, oval
from racestack.sim.vehicle import (
    PlantParams,
    PlantState,
    SteeringActuator,
    kinetic_energy,
    linear_steady_yaw_rate,
    plant_step,
    tire_force,
)


def run(state, delta, force, T, prm, dt=0.005):
    for _ in range(int(round(T / dt))):
        state = plant_step(state, delta, force, dt, prm)
    return state


def test_straight_coast_conserves_energy_without_drag():
    prm = PlantParams(c_drag=0.0)
    s0 = PlantState(Pose2D(0, 0, 0), 10.0)
    s1 = run(s0, 0.0, 0.0, 2.0, prm)
    assert kinetic_energy(s1, prm) == pytest.approx(kinetic_energy(s0, prm), rel=1e-12)
    assert s1.pose.x == pytest.approx(20.0, rel=1e-9)


def test_tyres_only_dissipate():
    prm = PlantParams(c_drag=0.0)
    s = PlantState(Pose2D(0, 0, 0), 10.0, v_y=0.5, r=0.3)
    e = kinetic_energy(s, prm)
    for _ in range(400):
        s = plant_step(s, 0.0, 0.0, 0.005, prm)
        e1 = kinetic_energy(s, prm)
        assert e1 <= e + 1e-9
        e = e1


def test_drag_decelerates():
    prm = PlantParams(c_drag=0.6)
    s = run(PlantState(Pose2D(0, 0, 0), 10.0), 0.0, 0.0, 1.0, prm)
    # dv/dt = -c v^2 / m  =>  v(t) = v0 / (1 + c v0 t / m)
    assert s.v_x == pytest.approx(10.0 / (1 + 0.6 * 10.0 / 200.0), rel=1e-6)


@pytest.mark.parametrize("params", [BicycleParams(), BicycleParams(l_f=0.7, l_r=0.9, C_f=-40000, C_r=-60000)])
@pytest.mark.parametrize("v", [5.0, 12.0])
def test_steady_state_yaw_rate(params, v):
    delta = 0.02
    prm = PlantParams(bicycle=params, c_drag=0.0, saturating_tires=False)
    s = run(PlantState(Pose2D(0, 0, 0), v, delta_actual=delta), delta, 0.0, 3.0, prm)
    L = params.l_f + params.l_r
    K = params.m / L * (params.l_r / -params.C_f - params.l_f / -params.C_r)
    r_ref = v * delta / (L + K * v * v)
    assert linear_steady_yaw_rate(params, v, delta) == pytest.approx(r_ref, rel=1e-9)
    assert s.r == pytest.approx(r_ref, rel=2e-3)


def test_tire_force_saturates():
    assert tire_force(-5e4, 1e-4, 1000.0) == pytest.approx(-5.0, rel=1e-3)
    assert abs(tire_force(-5e4, 1.0, 1000.0)) <= 1000.0
    assert tire_force(-5e4, 0.3, 1000.0, saturating=False) == -15000.0


def test_plant_step_limits_and_low_speed():
    prm = PlantParams()
    with pytest.raises(ValueError):
        plant_step(PlantState(Pose2D(0, 0, 0), 5.0), 0.0, 0.0, 0.01, prm)
    s = run(PlantState(Pose2D(0, 0, 0), 0.0), 0.0, -500.0, 0.5, prm)
    assert s.v_x == 0.0
    s = run(PlantState(Pose2D(0, 0, 0), 0.0), 5.0, 0.0, 0.5, prm)
    assert abs(s.delta_actual) <= prm.delta_max + 1e-12


def test_steering_actuator_delay():
    act = SteeringActuator(0.03)
    act.command(0.0, 0.2)
    assert act.output(0.02) == 0.0
    assert act.output(0.03) == 0.2


def test_pi_examples():
    cfg = PiConfig(k_p=100.0, k_i=10.0, ff_coeffs=(0.0, 0.0, 0.0))
    f, st = pi_step(PiState(), 10.0, 8.0, 0.0, cfg)
    assert f == pytest.approx(200.0) and st.integrator == 0.0
    f, st = pi_step(st, 10.0, 8.0, 0.1, cfg)
    assert st.integrator == pytest.approx(2.0) and f == pytest.approx(202.0)
    with pytest.raises(ValueError):
        pi_step(st, 10.0, 8.0, 0.1, cfg)


def test_pi_anti_windup():
    cfg = PiConfig(k_p=1000.0, k_i=100.0, f_max=500.0)
    st = PiState()
    for i in range(100):
        f, st = pi_step(st, 20.0, 0.0, i * 0.01, cfg)
        assert f == 500.0
    assert st.integrator == 0.0
    with pytest.raises(ValueError):
        PiConfig(f_min=1.0, f_max=0.0)


def test_pi_feedforward():
    cfg = PiConfig(ff_coeffs=(1.0, 2.0, 3.0))
    assert cfg.feedforward(2.0) == 17.0
    f, _ = pi_step(PiState(), 2.0, 2.0, 0.0, cfg)
    assert f == 17.0


def test_speed_loop_converges():
    prm = PlantParams()
    cfg = PiConfig()
    s, st = PlantState(Pose2D(0, 0, 0), 2.0), PiState()
    for i in range(2000):
        f, st = pi_step(st, 10.0, s.v_x, i * 0.005, cfg)
        s = plant_step(s, 0.0, f, 0.005, prm)
    assert s.v_x == pytest.approx(10.0, abs=0.05)


def test_odometry_examples():
    prm = PlantParams()
    s = PlantState(Pose2D(0, 0, 0), 2 * math.pi * prm.r_dyn, r=0.0)
    o = simulate_odometry(s, prm, OdometryConfig(), None)
    assert o.n_rl == pytest.approx(1.0) and o.n_rr == pytest.approx(1.0) and o.psi_dot == 0.0
    s = PlantState(Pose2D(0, 0, 0), 5.0, r=0.5)
    o = simulate_odometry(s, prm, OdometryConfig(), None)
    circ = 2 * math.pi * prm.r_dyn
    assert (o.n_rr - o.n_rl) * circ == pytest.approx(prm.track_width * 0.5)


def test_latency_model():
    rng = np.random.default_rng(0)
    m = LatencyModel()
    x = np.array([m.sample(rng) for _ in range(20000)])
    assert x.min() >= m.minimum
    assert x.mean() == pytest.approx(m.mean, rel=0.03)


def test_lidar_range_and_determinism():
    xy = np.array([[41.5, 0.0], [43.0, 2.0]])
    cfg = LidarConfig(noise=0.0, drop_prob=0.0, ground_points=0)
    colors = [ClassLabel.SMALL_BLUE] * 2
    clouds = simulate_lidar(xy, colors, Pose2D(0, 0, 0), cfg, np.random.default_rng(1))
    for c in clouds:
        assert np.all(np.hypot(*c.points[:, :2].T) <= cfg.range + 1e-9)
    a = simulate_lidar(xy, colors, Pose2D(0, 0, 0), LidarConfig(), np.random.default_rng(2))
    b = simulate_lidar(xy, colors, Pose2D(0, 0, 0), LidarConfig(), np.random.default_rng(2))
    for ca, cb in zip(a, b):
        np.testing.assert_array_equal(ca.points, cb.points)


@pytest.mark.parametrize("make", [oval, fsg_like, circle])
def test_track_fixtures(make, tmp_path):
    tr = make()
    assert tr.closed and tr.length > 50
    tr.save(tmp_path / "t.json")
    back = TrackDefinition.load(tmp_path / "t.json")
    np.testing.assert_allclose(back.cone_xy, tr.cone_xy)
    assert back.cone_colors == tr.cone_colors
    assert load_track(str(tmp_path / "t.json")).name == tr.name


def test_track_validation():
    with pytest.raises(ValueError):
        TrackDefinition([((0.0, 0.0), ClassLabel.SMALL_BLUE)], Pose2D(0, 0, 0))
    with pytest.raises(ValueError):
        TrackDefinition([((float(i), 0.0), ClassLabel.UNKNOWN) for i in range(4)], Pose2D(0, 0, 0))
