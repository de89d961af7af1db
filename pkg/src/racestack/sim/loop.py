"""Closed-loop execution: sensors -> perception -> localization -> planning -> control -> plant.

Everything runs on one deterministic schedule of integer plant ticks. Lidar
scans are triggered together (or in two phases), arrive after a random
latency, are grouped by the scan-sync state machine and then processed with
the pose filter rolled back to the trigger time.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..camera import ClassLabel, ColorHistogramClassifier, validate_proposals
from ..geometry import Pose2D, body_to_world, segments_intersect, world_to_body
from ..localization.association import icnn_associate, individual_distances, jcbb_associate
from ..localization.ekf import (
    EkfState,
    OdometryInput,
    VehicleParams,
    correct,
    observation_jacobians,
    observe,
    odometry_process_noise,
    predict,
)
from ..localization.mapping import LandmarkMap
from ..longitudinal import PiConfig, PiState, pi_step
from ..mpc import BicycleParams, LateralMpc, MpcConfig
from ..perception import PerceptionConfig, merge_scans, propose_landmarks
from ..planning import (
    CenterlinePath,
    GgsMap,
    PlannerConfig,
    VelocityProfile,
    close_centerline,
    extract_centerline,
    velocity_profile,
)
from ..scansync import (
    LatencyEstimator,
    NotInitialized,
    ScanGrouper,
    ScanHeader,
    find_counter_offsets,
)
from .scenario import ScenarioConfig
from .sensors import DEFAULT_CAMERAS, DEFAULT_MOUNTS, LatencyModel, LidarConfig, OdometryConfig, simulate_lidar, simulate_odometry
from .tracks import TrackDefinition
from .vehicle import PlantParams, PlantState, SteeringActuator, derivatives, plant_step

log = logging.getLogger(__name__)

TRACE_FIELDS = (
    "t", "x", "y", "psi", "v_x", "v_y", "r", "delta", "delta_cmd", "force",
    "ekf_x", "ekf_y", "ekf_psi", "v_target", "progress", "a_x", "a_y", "lateral_offset",
)


@dataclass
class ScenarioLog:
    trace: dict[str, list] = field(default_factory=lambda: {k: [] for k in TRACE_FIELDS})
    mpc_trace: list[tuple] = field(default_factory=list)
    lon_trace: list[tuple] = field(default_factory=list)
    frames: list[dict] = field(default_factory=list)  # per processed scan group
    timings: dict[str, list[float]] = field(default_factory=lambda: defaultdict(list))
    map_snapshot: list[dict] = field(default_factory=list)
    map_completion: list[tuple[float, float]] = field(default_factory=list)  # (distance, fraction)
    lap_times: list[float] = field(default_factory=list)
    lap_starts: list[float] = field(default_factory=list)
    closed_path_progress: float | None = None  # lap fraction when the full-lap centreline was obtained
    release_time: float = 0.0
    diverged: bool = False
    cause: str = ""
    completed: bool = False
    track_length: float = float("nan")
    track_name: str = ""
    cones: list[dict] = field(default_factory=list)
    camera_enabled: bool = True

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=float) for k, v in self.trace.items()}


def build_configs(cfg: ScenarioConfig):
    v = cfg.vehicle
    bike = BicycleParams(v.m, v.I_z, v.l_f, v.l_r, v.C_f, v.C_r)
    plant = PlantParams(bike, v.mu, v.c_drag, v.tau_steer, v.t_delay, v.delta_max, v.track_width, v.r_dyn)
    ls = cfg.sensors.lidar
    lidar = LidarConfig(ls.range, ls.noise, ls.drop_prob, ls.density, 4, 80, ls.ground_points, ls.rate,
                        DEFAULT_MOUNTS)
    os_ = cfg.sensors.odometry
    odo = OdometryConfig(os_.wheel_sigma, os_.yaw_sigma, os_.yaw_bias, os_.rate)
    p = cfg.perception
    perc = PerceptionConfig(p.dbscan_eps, p.dbscan_min_points, tuple(p.max_variance), p.eps1, p.eps2, p.max_range)
    pl = cfg.planner
    plan = PlannerConfig(spacing=pl.spacing, lookahead=pl.lookahead, profile_scale=pl.profile_scale)
    if pl.ggs.file:
        ggs = GgsMap.load_csv(pl.ggs.file, pl.v_cap)
    else:
        ggs = GgsMap.point_mass(mu=pl.ggs.a_lat / 9.81, mass=v.m, power=pl.ggs.power, v_cap=pl.v_cap,
                                c_drag=pl.ggs.c_drag)
    m = cfg.mpc
    Q = np.diag(m.Q)
    mpc = MpcConfig(m.N, m.T, Q, m.R, m.P_scale * Q, m.t_D, u_min=m.u_min, u_max=m.u_max, v_min=m.v_min)
    pi = cfg.pi
    picfg = PiConfig(pi.k_p, pi.k_i, pi.i_min, pi.i_max, tuple(pi.ff_coeffs), pi.f_min, pi.f_max)
    return plant, lidar, odo, perc, plan, ggs, mpc, picfg


class GroundTruth:
    """Progress along the true centreline and boundary-crossing checks."""

    def __init__(self, track: TrackDefinition):
        cl = track.centerline
        self.closed = track.closed
        self.xy = cl[::2] if len(cl) > 4000 else cl
        seg = np.hypot(*np.diff(self.xy, axis=0).T)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = track.length
        self.tree = cKDTree(self.xy)
        a, b = track.boundary_segments()
        step = max(1, int(round(0.5 / max(np.median(np.hypot(*(b - a).T)), 1e-6)))) if len(a) else 1
        # coarsen the dense boundary polylines to ~0.5 m segments
        self.a, self.b = self._coarsen(track, step)
        self.seg_tree = cKDTree(0.5 * (self.a + self.b)) if len(self.a) else None
        self.seg_len = float(np.max(np.hypot(*(self.b - self.a).T))) if len(self.a) else 0.0
        self._laps = 0
        self._last_s = 0.0

    @staticmethod
    def _coarsen(track, step):
        A, B = [], []
        for poly in (track.left, track.right):
            if poly is None or len(poly) < 2:
                continue
            pts = poly[::step]
            if track.closed:
                pts = np.vstack([pts, pts[:1]])
            elif not np.allclose(pts[-1], poly[-1]):
                pts = np.vstack([pts, poly[-1:]])
            A.append(pts[:-1])
            B.append(pts[1:])
        if not A:
            return np.zeros((0, 2)), np.zeros((0, 2))
        return np.vstack(A), np.vstack(B)

    def project(self, p) -> tuple[float, float]:
        """(arc length, signed lateral offset, + to the left) of point p on the centreline."""
        _, k = self.tree.query(p)
        n = len(self.xy)
        best = (math.inf, 0.0, 0.0)
        for j in (k - 1, k):
            if j < 0 or j + 1 >= n:
                if not (self.closed and j == n - 1):
                    continue
            a = self.xy[j % n]
            b = self.xy[(j + 1) % n]
            ab = b - a
            L2 = float(ab @ ab)
            t = min(max(float((p - a) @ ab) / L2, 0.0), 1.0) if L2 > 0 else 0.0
            q = a + t * ab
            d = float(np.hypot(*(p - q)))
            if d < best[0]:
                cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0])
                s = self.s[j % n] + t * math.sqrt(L2) if j + 1 < n else self.s[-1] + t * math.sqrt(L2)
                best = (d, s, math.copysign(d, cross))
        return best[1], best[2]

    def progress(self, p) -> tuple[float, float]:
        """Unwrapped progress over laps and lateral offset."""
        s, off = self.project(p)
        if self.closed:
            ds = s - self._last_s
            if ds < -0.5 * self.length:
                self._laps += 1
            elif ds > 0.5 * self.length:
                self._laps -= 1
            self._last_s = s
            return self._laps * self.length + s, off
        return s, off

    def crosses(self, p0, p1) -> bool:
        if self.seg_tree is None:
            return False
        mid = 0.5 * (np.asarray(p0) + np.asarray(p1))
        r = 0.5 * (float(np.hypot(*(np.asarray(p1) - p0))) + self.seg_len) + 1e-6
        idx = self.seg_tree.query_ball_point(mid, r)
        if not idx:
            return False
        return bool(segments_intersect(p0, p1, self.a[idx], self.b[idx]).any())


class Stack:
    """The autonomy software: everything that only sees sensor data."""

    def __init__(self, cfg: ScenarioConfig, plant: PlantParams, perc: PerceptionConfig, plan: PlannerConfig,
                 ggs: GgsMap, mpc_cfg: MpcConfig, pi_cfg: PiConfig, n_lidars: int, period: float,
                 cameras, start_pose_rear: Pose2D, log_: ScenarioLog):
        self.cfg = cfg
        self.plant_params = plant
        self.perc = perc
        self.plan_cfg = plan
        self.ggs = ggs.scaled(plan.profile_scale)
        self.l_r = plant.bicycle.l_r
        self.vp = VehicleParams(plant.r_dyn, "rev/s")
        lc = cfg.localization
        self.input_cov = np.diag([lc.wheel_sigma**2, lc.wheel_sigma**2, lc.yaw_sigma**2])
        self.extra = np.square(lc.extra_process)
        self.R_meas = np.eye(2) * lc.meas_sigma**2
        self.ekf = EkfState(start_pose_rear, np.diag([1e-4, 1e-4, 1e-5]))
        self.t_ekf = 0.0
        self.history: list[tuple[float, EkfState, OdometryInput]] = []  # (t, state after, input used)
        self.last_u = OdometryInput(0.0, 0.0, 0.0)
        self.lmap = LandmarkMap(n_confirm=lc.n_confirm, gate_radius=lc.gate_radius)
        self.cameras = cameras
        self.classifier = ColorHistogramClassifier()
        self.n_lidars = n_lidars
        self.period = period
        self.lat_est = LatencyEstimator(100)
        self.header_buf: list[list[ScanHeader]] = [[] for _ in range(n_lidars)]
        self.grouper: ScanGrouper | None = None
        self.path: CenterlinePath | None = None
        self.profile: VelocityProfile | None = None
        self.closed_path: CenterlinePath | None = None
        self.closed_profile: VelocityProfile | None = None
        self.mpc = LateralMpc(mpc_cfg, plant.bicycle)
        self.pi_cfg = pi_cfg
        self.pi_state = PiState()
        self.log = log_
        self.last_control_time = 0.0
        self.v_meas = 0.0
        self.yaw_meas = 0.0
        self._new_landmarks = 0

    # --- localization -------------------------------------------------
    def _q(self, psi, dt):
        return odometry_process_noise(psi, dt, self.vp, self.input_cov, self.extra)

    def on_odometry(self, u: OdometryInput) -> None:
        dt = u.timestamp - self.t_ekf
        self.last_u = u
        self.v_meas = self.vp.wheel_gain * (u.n_rl + u.n_rr)
        self.yaw_meas = u.psi_dot
        if dt <= 0:
            return
        self.ekf = predict(self.ekf, u, dt, self.vp, self._q(self.ekf.pose.psi, dt))
        self.t_ekf = u.timestamp
        self.history.append((u.timestamp, self.ekf, u))
        if len(self.history) > 200:
            del self.history[:100]

    def _state_at(self, ts: float):
        """Filter state at ``ts`` and the index of the first later history entry."""
        hist = self.history
        k = len(hist)
        while k > 0 and hist[k - 1][0] > ts:
            k -= 1
        if k == len(hist):
            base_t, base = (hist[-1][0], hist[-1][1]) if hist else (self.t_ekf, self.ekf)
            u = self.last_u
        elif k == 0:
            return self.ekf, len(hist), False
        else:
            base_t, base = hist[k - 1][0], hist[k - 1][1]
            u = hist[k][2]
        dt = ts - base_t
        if dt > 1e-9:
            base = predict(base, u, dt, self.vp, self._q(base.pose.psi, dt))
        return base, k, True

    def _replay(self, state: EkfState, ts: float, k: int) -> None:
        hist = self.history
        t_prev = ts
        new_hist = hist[:k]
        for t_i, _, u in hist[k:]:
            dt = t_i - t_prev
            if dt > 1e-9:
                state = predict(state, u, dt, self.vp, self._q(state.pose.psi, dt))
            new_hist.append((t_i, state, u))
            t_prev = t_i
        if not hist[k:]:
            self.t_ekf = ts
            new_hist.append((ts, state, self.last_u))
        self.history = new_hist
        self.ekf = state

    def localize(self, ts: float, meas_body: np.ndarray, labels) -> tuple[EkfState, list, list]:
        state, k, ok = self._state_at(ts)
        pairs, unmatched = [], list(range(len(meas_body)))
        lm = self.lmap.confirmed_positions()
        if len(lm) and len(meas_body):
            pose = state.pose
            near = np.flatnonzero(np.hypot(*(lm - pose.position).T) < self.perc.max_range + 3.0)
            if len(near):
                pred = observe(pose, lm[near])
                H = observation_jacobians(pose, lm[near])
                colors = self.lmap.confirmed_colors()
                compat = None
                if self.cfg.localization.use_colors:
                    compat = np.array([[lab == ClassLabel.UNKNOWN or lab == colors[j] for j in near] for lab in labels])
                if self.cfg.localization.association == "jcbb":
                    assoc = jcbb_associate(pred, meas_body, H, state.covariance, self.R_meas,
                                           self.cfg.localization.individual_gate,
                                           self.cfg.localization.joint_gate,
                                           self.cfg.localization.max_nodes, compat)
                else:
                    S = np.einsum("mij,jk,mlk->mil", H, state.covariance, H) + self.R_meas
                    assoc = icnn_associate(pred, meas_body, S, self.cfg.localization.individual_gate, compat)
                pairs = [(m, int(near[j])) for m, j in assoc.pairs]
                unmatched = assoc.unmatched
                state, _ = correct(state, meas_body, pairs, lm, self.R_meas)
        if ok:
            self._replay(state, ts, k)
        else:
            self.ekf = state
        return state, pairs, unmatched

    # --- scan handling --------------------------------------------------
    def on_header(self, h: ScanHeader, now: float) -> list:
        self.lat_est.add(h)
        if self.grouper is None:
            self.header_buf[h.lidar_id].append(h)
            if all(len(b) >= 5 for b in self.header_buf):
                try:
                    state = find_counter_offsets(self.header_buf, self.lat_est.mean, 5, self.period)
                except NotInitialized:
                    for b in self.header_buf:
                        del b[:-60]
                    return []
                state.phases = list(self.phases)
                self.grouper = ScanGrouper(state, self.period)
                self.header_buf = [[] for _ in range(self.n_lidars)]
                log.info("scan sync initialised at t=%.2f with offsets %s", now, state.offsets)
            return []
        return self.grouper.push(h)

    def process_group(self, clouds, images, ts: float, now: float) -> None:
        t0 = time.perf_counter()
        mounts = [DEFAULT_MOUNTS[i] for i in sorted(clouds)]
        merged = merge_scans([clouds[i] for i in sorted(clouds)], [m.extrinsic for m in mounts])
        t1 = time.perf_counter()
        props = propose_landmarks(merged, self.perc)
        t2 = time.perf_counter()
        if self.cameras is not None:
            validated = validate_proposals(props, self.cameras, images, self.classifier)
        else:
            validated = [(p, ClassLabel.UNKNOWN) for p in props]
        t3 = time.perf_counter()
        meas = np.array([p.position for p, _ in validated], dtype=float).reshape(-1, 2)
        labels = [lab for _, lab in validated]
        state, pairs, unmatched = self.localize(ts, meas, labels)
        t4 = time.perf_counter()
        for _, j in pairs:
            self.lmap.observe_landmark(j)
        if unmatched:
            world = body_to_world(state.pose, meas[unmatched])
            new = self.lmap.update([(world[i], labels[m]) for i, m in enumerate(unmatched)])
            self._new_landmarks += len(new)
        t5 = time.perf_counter()
        self.replan()
        t6 = time.perf_counter()
        tm = self.log.timings
        tm["clustering"].append(t2 - t1)
        tm["perception"].append((t2 - t0) + (t3 - t2))
        if self.cameras is not None:
            tm["camera"].append(t3 - t2)
        tm["localization"].append(t5 - t3)
        tm["planning"].append(t6 - t5)
        last_ctrl = tm["control"][-1] if tm["control"] else 0.0
        tm["pipeline"].append((t6 - t0) + last_ctrl)
        self.log.frames.append({"t": now, "ts": ts, "proposals": len(props), "validated": len(validated),
                                "matched": len(pairs), "landmarks": len(self.lmap.landmarks)})

    # --- planning -------------------------------------------------------
    def replan(self) -> None:
        pose = self.ekf.pose
        if self.closed_path is None and self._new_landmarks and len(self.lmap.landmarks) >= 12:
            self._new_landmarks = 0
            closed = close_centerline(self.lmap, pose, self.plan_cfg)
            if closed is not None and len(closed) > 10:
                self.closed_path = closed
                self.closed_profile = velocity_profile(closed, self.ggs)
                self.on_closed()
        if self.closed_path is not None:
            self.path, self.profile = self.closed_path, self.closed_profile
            return
        path = extract_centerline(self.lmap, pose, self.plan_cfg.lookahead, self.plan_cfg)
        if len(path) < 4:
            return
        v0 = max(self.v_meas, self.cfg.planner.v_floor)
        self.path = path
        self.profile = velocity_profile(path, self.ggs, v0, self.cfg.planner.v_floor)

    def on_closed(self) -> None:
        pass

    # --- control ----------------------------------------------------------
    def control(self, t: float, v_y_meas: float, released: bool) -> tuple[float, float, float]:
        """Steering command, force command and the speed target."""
        t0 = time.perf_counter()
        pose_cg = self.ekf.pose.shifted(self.l_r)
        if not released or self.path is None or len(self.path) < 2:
            force, self.pi_state = pi_step(self.pi_state, 0.0, self.v_meas, t, self.pi_cfg)
            force = min(force, 0.0)
            self.log.timings["control"].append(time.perf_counter() - t0)
            return self.mpc.last_u, force, 0.0
        info = self.mpc.step(t, pose_cg, (self.v_meas, v_y_meas, self.yaw_meas), self.path, self.profile)
        s = self.path.project(pose_cg.position) + self.v_meas * self.cfg.planner.preview_time
        v_target = self.profile.at(self.path, s)
        if not self.path.closed and s > self.path.s[-1]:
            v_target = self.cfg.planner.v_floor
        v_target = max(v_target, self.cfg.planner.v_floor)
        force, self.pi_state = pi_step(self.pi_state, v_target, self.v_meas, t, self.pi_cfg)
        self.log.lon_trace.append((t, v_target, self.v_meas, force))
        self.log.timings["control"].append(time.perf_counter() - t0)
        self.log.timings["mpc"].append(time.perf_counter() - t0)
        return info.u_out, force, v_target


def _rng_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    names = ("lidar", "odometry", "latency", "camera", "offsets", "vy")
    return dict(zip(names, (np.random.default_rng(s) for s in ss.spawn(len(names)))))


def run_closed_loop(track: TrackDefinition, cfg: ScenarioConfig) -> ScenarioLog:
    """Run the full stack against the simulated vehicle until the laps are done or it diverges."""
    plant_p, lidar_cfg, odo_cfg, perc, plan, ggs, mpc_cfg, pi_cfg = build_configs(cfg)
    rngs = _rng_streams(cfg.seed)
    log_ = ScenarioLog(track_name=track.name, camera_enabled=cfg.sensors.camera.enabled)
    log_.track_length = track.length
    log_.cones = [{"x": p[0], "y": p[1], "color": c.value} for p, c in track.cones]
    truth = GroundTruth(track)
    l_r = plant_p.bicycle.l_r

    dt = cfg.plant_dt
    odo_every = max(1, int(round(1.0 / (odo_cfg.rate * dt))))
    ctrl_every = max(1, int(round(1.0 / (cfg.control_rate * dt))))
    lidar_every = max(1, int(round(1.0 / (lidar_cfg.rate * dt))))
    period = lidar_every * dt
    n_lidars = len(lidar_cfg.mounts)

    cameras = None
    if cfg.sensors.camera.enabled:
        cameras = [c.calibrate(cfg.sensors.camera.degree)[0] for c in DEFAULT_CAMERAS]

    start = track.start_pose
    plant = PlantState(start, 0.0)
    stack = Stack(cfg, plant_p, perc, plan, ggs, mpc_cfg, pi_cfg, n_lidars, period, cameras,
                  plant.rear_axle(l_r), log_)
    phases = [(i % 2) if cfg.sensors.lidar.async_trigger else 0 for i in range(n_lidars)]
    stack.phases = phases
    offsets = [int(x) for x in rngs["offsets"].integers(0, 5000, n_lidars)]
    actuator = SteeringActuator(plant_p.t_delay)
    ls = cfg.sensors.lidar
    latency_model = LatencyModel(ls.latency_min, ls.latency_jitter, ls.latency_spike_prob,
                                 min(0.01, ls.latency_spike_max), ls.latency_spike_max)

    pending: list = []  # heap of (receive_time, seq, header)
    scan_data: dict[tuple[int, int], tuple] = {}  # (lidar, counter) -> (cloud, images, start_time)
    seq = 0
    delta_cmd, force_cmd, v_target = 0.0, 0.0, 0.0
    released = False
    release_tick = None
    cone_xy = track.cone_xy
    cone_colors = track.cone_colors
    tree = cKDTree(cone_xy)
    lap_target = cfg.termination.laps
    warm_ticks = int(cfg.termination.warmup_max / dt)
    max_ticks = int((cfg.termination.max_time + cfg.termination.warmup_max) / dt)
    prev_cg = plant.pose.position
    prog0 = None
    laps_done = 0
    half_period_ticks = lidar_every // 2

    for tick in range(max_ticks):
        t = tick * dt
        # --- sensors ------------------------------------------------------
        for phase in set(phases):
            if (tick - phase * half_period_ticks) % lidar_every == 0 and tick - phase * half_period_ticks >= 0:
                k = (tick - phase * half_period_ticks) // lidar_every
                rear = plant.rear_axle(l_r)
                near = tree.query_ball_point(rear.position, lidar_cfg.range + 2.0)
                nxy = cone_xy[near]
                ncol = [cone_colors[i] for i in near]
                lidars = [i for i in range(n_lidars) if phases[i] == phase]
                sub = LidarConfig(**{**lidar_cfg.__dict__, "mounts": tuple(lidar_cfg.mounts[i] for i in lidars)})
                clouds = simulate_lidar(nxy, ncol, rear, sub, rngs["lidar"], t)
                images = None
                if cameras is not None:
                    body = world_to_body(rear, nxy) if len(nxy) else np.zeros((0, 2))
                    images = [c.render(body, ncol, t, rngs["camera"], cfg.sensors.camera.pixel_noise)
                              for c in DEFAULT_CAMERAS]
                for i, cloud in zip(lidars, clouds):
                    counter = k + offsets[i]
                    lat = latency_model.sample(rngs["latency"])
                    h = ScanHeader(i, counter, t, t + lat)
                    scan_data[(i, counter)] = (cloud, images, t)
                    heapq.heappush(pending, (h.receive_time, seq, h))
                    seq += 1
        while pending and pending[0][0] <= t + 1e-12:
            _, _, h = heapq.heappop(pending)
            groups = stack.on_header(h, t)
            _process(stack, groups, scan_data, t)
        if stack.grouper is not None and tick % odo_every == 0:
            _process(stack, stack.grouper.flush(t), scan_data, t)
        if tick % lidar_every == 0:
            # scans that were never grouped (e.g. before sync) expire after a second
            for key in [k for k, v in scan_data.items() if v[2] < t - 1.0]:
                del scan_data[key]
        if tick % odo_every == 0 and tick > 0:
            u = simulate_odometry(plant, plant_p, odo_cfg, rngs["odometry"], t)
            stack.on_odometry(u)

        # --- release ------------------------------------------------------
        if not released and ((stack.path is not None and stack.grouper is not None) or tick >= warm_ticks):
            if stack.path is None:
                log_.cause = "no path available after warm-up"
                log_.diverged = True
                break
            released = True
            release_tick = tick
            log_.release_time = t
            prog0 = truth.progress(plant.pose.position)[0]
            log_.lap_starts.append(t)

        # --- control --------------------------------------------------------
        if tick % ctrl_every == 0:
            vy = plant.v_y + rngs["vy"].normal(0.0, cfg.sensors.v_y_sigma) if cfg.sensors.v_y_sigma > 0 else plant.v_y
            delta_cmd, force_cmd, v_target = stack.control(t, vy, released)
            actuator.command(t, delta_cmd)
            prog, off = truth.progress(plant.pose.position)
            rel = (prog - prog0) if prog0 is not None else 0.0
            d = derivatives(np.r_[plant.as_array()], actuator.output(t), force_cmd, plant_p)
            a_x = d[3] - plant.v_y * plant.r
            a_y = d[4] + plant.v_x * plant.r
            tr = log_.trace
            for key, val in (("t", t), ("x", plant.pose.x), ("y", plant.pose.y), ("psi", plant.pose.psi),
                             ("v_x", plant.v_x), ("v_y", plant.v_y), ("r", plant.r),
                             ("delta", plant.delta_actual), ("delta_cmd", delta_cmd), ("force", force_cmd),
                             ("ekf_x", stack.ekf.pose.x), ("ekf_y", stack.ekf.pose.y),
                             ("ekf_psi", stack.ekf.pose.psi), ("v_target", v_target), ("progress", rel),
                             ("a_x", a_x), ("a_y", a_y), ("lateral_offset", off)):
                tr[key].append(float(val))
            if released:
                if stack.closed_path is not None and log_.closed_path_progress is None:
                    log_.closed_path_progress = rel / truth.length if truth.closed else rel
                if truth.closed:
                    while rel >= (laps_done + 1) * truth.length:
                        laps_done += 1
                        tl = t - log_.lap_starts[-1]
                        log_.lap_times.append(tl)
                        log_.lap_starts.append(t)
                    if laps_done >= lap_target:
                        log_.completed = True
                        break
                elif rel >= truth.length - 5.0:
                    log_.completed = True
                    log_.lap_times.append(t - log_.lap_starts[-1])
                    break
                if rel > cfg.termination.max_distance:
                    log_.cause = "distance budget exhausted"
                    break
            if tick % (ctrl_every * 25) == 0:
                lm = stack.lmap.confirmed_positions()
                frac = 0.0
                if len(lm):
                    dd, _ = cKDTree(lm).query(cone_xy)
                    frac = float(np.mean(dd < 0.5))
                log_.map_completion.append((rel, frac))

        # --- plant --------------------------------------------------------
        delta_now = actuator.output(t)
        if released:
            plant = plant_step(plant, delta_now, force_cmd, dt, plant_p)
        cg = plant.pose.position
        if released and truth.crosses(prev_cg, cg):
            log_.diverged = True
            log_.cause = f"boundary crossed at t={t:.2f} s"
            break
        prev_cg = cg
    else:
        if not log_.completed and not log_.cause:
            log_.cause = "time budget exhausted"
    log_.map_snapshot = stack.lmap.to_json()
    log_.mpc_trace = stack.mpc.trace
    return log_


def _process(stack: Stack, groups, scan_data, now: float) -> None:
    for g in groups:
        clouds = {}
        images = None
        ts = None
        for lid, h in g.headers.items():
            item = scan_data.pop((lid, h.counter), None)
            if item is None:
                continue
            clouds[lid], imgs, ts = item
            images = images or imgs
        if clouds and ts is not None:
            stack.process_group(clouds, images, ts, now)
