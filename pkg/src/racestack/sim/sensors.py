"""Synthetic lidar, odometry and camera sensors.

The vehicle frame is the rear-axle frame of the stack (x forward, y left, z up,
origin on the ground below the rear axle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ..camera import CameraModel, ClassLabel, SyntheticImage, fit_projection
from ..geometry import Pose2D, RigidTransform3, body_to_world, world_to_body, wrap_angles
from ..localization.ekf import OdometryInput
from ..perception import PointCloud
from .vehicle import PlantParams, PlantState

# base radius, height (m)
CONE_SHAPE = {
    ClassLabel.SMALL_BLUE: (0.114, 0.325),
    ClassLabel.SMALL_YELLOW: (0.114, 0.325),
    ClassLabel.SMALL_ORANGE: (0.114, 0.325),
    ClassLabel.BIG_ORANGE: (0.142, 0.505),
}
CONE_RGB = {
    ClassLabel.SMALL_BLUE: (20, 60, 220),
    ClassLabel.SMALL_YELLOW: (235, 200, 20),
    ClassLabel.SMALL_ORANGE: (240, 110, 20),
    ClassLabel.BIG_ORANGE: (240, 110, 20),
}
CONE_CENTER_Z = 0.16  # calibration target height of a small cone


@dataclass(frozen=True)
class LidarMount:
    name: str
    x: float
    y: float
    z: float
    yaw: float
    half_fov: float  # radians, horizontal half-angle around the mount yaw

    @property
    def extrinsic(self) -> RigidTransform3:
        """Lidar frame to vehicle frame."""
        return RigidTransform3.from_yaw(self.yaw, (self.x, self.y, self.z))


DEFAULT_MOUNTS = (
    LidarMount("front_left", 1.6, 0.25, 0.25, math.radians(30), math.radians(80)),
    LidarMount("front_right", 1.6, -0.25, 0.25, math.radians(-30), math.radians(80)),
    LidarMount("rear_left", -0.1, 0.4, 0.9, math.radians(120), math.radians(60)),
    LidarMount("rear_right", -0.1, -0.4, 0.9, math.radians(-120), math.radians(60)),
)


@dataclass(frozen=True)
class LidarConfig:
    range: float = 42.0
    noise: float = 0.01
    drop_prob: float = 0.05
    density: float = 800.0  # points per cone ~ density / d^2
    min_points: int = 4
    max_points: int = 80
    ground_points: int = 40
    rate: float = 20.0
    mounts: tuple[LidarMount, ...] = DEFAULT_MOUNTS


def _cone_surface(rng, n, radius, height, toward):
    """``n`` points on the visible half of a cone surface, relative to its base centre."""
    h = rng.uniform(0.03, 0.9 * height, n)
    rho = radius * (1.0 - h / height)
    phi = toward + rng.uniform(-0.5 * math.pi, 0.5 * math.pi, n)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), h], axis=1)


def simulate_lidar(cone_xy: np.ndarray, cone_colors, pose: Pose2D, cfg: LidarConfig,
                   rng: np.random.Generator, timestamp: float = 0.0) -> list[PointCloud]:
    """One scan per mount, each in its own lidar frame.

    Args:
        cone_xy: (n, 2) world cone positions.
        cone_colors: cone classes (sets the cone size).
        pose: rear-axle pose of the vehicle.
        cfg: lidar configuration.
        rng: generator; identical seeds give identical clouds.
    """
    body = world_to_body(pose, cone_xy) if len(cone_xy) else np.zeros((0, 2))
    clouds = []
    for mount in cfg.mounts:
        rel = body - [mount.x, mount.y]
        dist = np.hypot(rel[:, 0], rel[:, 1])
        bearing = np.arctan2(rel[:, 1], rel[:, 0])
        vis = (dist <= cfg.range) & (np.abs(wrap_angles(bearing - mount.yaw)) <= mount.half_fov) & (dist > 0.3)
        pts = []
        for i in np.flatnonzero(vis):
            radius, height = CONE_SHAPE[cone_colors[i]]
            n = int(np.clip(int(cfg.density / dist[i] ** 2), cfg.min_points, cfg.max_points))
            # the sensor sees the face turned towards it
            local = _cone_surface(rng, n, radius, height, bearing[i] + math.pi)
            local[:, :2] += body[i]
            keep = rng.random(n) >= cfg.drop_prob
            local = local[keep]
            # radial distance to the mount must respect the range limit
            rd = np.hypot(local[:, 0] - mount.x, local[:, 1] - mount.y)
            pts.append(local[rd <= cfg.range])
        if cfg.ground_points:
            r = cfg.range * np.sqrt(rng.random(cfg.ground_points))
            a = mount.yaw + rng.uniform(-mount.half_fov, mount.half_fov, cfg.ground_points)
            g = np.stack([mount.x + r * np.cos(a), mount.y + r * np.sin(a),
                          rng.normal(0.0, 0.02, cfg.ground_points)], axis=1)
            pts.append(g)
        P = np.vstack(pts) if pts else np.zeros((0, 3))
        if cfg.noise > 0 and len(P):
            P = P + rng.normal(0.0, cfg.noise, P.shape)
        # vehicle frame -> lidar frame
        ext = mount.extrinsic
        local = (P - ext.translation) @ ext.rotation
        clouds.append(PointCloud(local, mount.name, timestamp))
    return clouds


@dataclass(frozen=True)
class LatencyModel:
    """Network latency: a short uniform floor with occasional delay spikes."""

    minimum: float = 0.004
    jitter: float = 0.004
    spike_prob: float = 0.15
    spike_min: float = 0.01
    spike_max: float = 0.04

    def sample(self, rng: np.random.Generator) -> float:
        lat = self.minimum + rng.random() * self.jitter
        if rng.random() < self.spike_prob:
            lat += rng.uniform(self.spike_min, max(self.spike_max, self.spike_min))
        return lat

    @property
    def mean(self) -> float:
        return self.minimum + 0.5 * self.jitter + self.spike_prob * 0.5 * (self.spike_min + max(self.spike_max, self.spike_min))


@dataclass(frozen=True)
class OdometryConfig:
    wheel_sigma: float = 0.02  # rev/s
    yaw_sigma: float = 0.005  # rad/s
    yaw_bias: float = 0.0
    rate: float = 100.0


def simulate_odometry(state: PlantState, params: PlantParams, cfg: OdometryConfig,
                      rng: np.random.Generator | None, timestamp: float = 0.0) -> OdometryInput:
    """Rear wheel speeds (rev/s) from rolling without slip, plus gyro yaw rate."""
    circ = 2.0 * math.pi * params.r_dyn
    half = 0.5 * params.track_width * state.r
    n_rl = (state.v_x - half) / circ
    n_rr = (state.v_x + half) / circ
    yaw = state.r + cfg.yaw_bias
    if rng is not None:
        n_rl += rng.normal(0.0, cfg.wheel_sigma) if cfg.wheel_sigma > 0 else 0.0
        n_rr += rng.normal(0.0, cfg.wheel_sigma) if cfg.wheel_sigma > 0 else 0.0
        yaw += rng.normal(0.0, cfg.yaw_sigma) if cfg.yaw_sigma > 0 else 0.0
    return OdometryInput(n_rl, n_rr, yaw, timestamp)


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera covering one depth band of the ground, optionally yawed."""

    name: str
    f: float
    x_range: tuple[float, float]  # depth band along the optical axis
    half_fov: float
    width: int = 840
    height: int = 480
    cx: float = 420.0
    cy: float = 200.0
    position: tuple[float, float, float] = (0.0, 0.0, 1.0)
    yaw: float = 0.0

    def to_camera(self, pts3: np.ndarray) -> np.ndarray:
        """Vehicle-frame points to (depth, left, up) camera coordinates."""
        pts3 = np.asarray(pts3, dtype=float).reshape(-1, 3)
        d = pts3 - np.asarray(self.position)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def to_vehicle_xy(self, cam_xy: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x, y = cam_xy[:, 0], cam_xy[:, 1]
        return np.stack([c * x - s * y + self.position[0], s * x + c * y + self.position[1]], axis=1)

    def project(self, pts3: np.ndarray) -> np.ndarray:
        """Pixel (u, v) of vehicle-frame 3D points (must lie in front of the camera)."""
        X, Y, Z = self.to_camera(pts3).T
        return np.stack([self.cx - self.f * Y / X, self.cy - self.f * Z / X], axis=1)

    def fov_polygon(self) -> np.ndarray:
        x0, x1 = self.x_range
        t = math.tan(self.half_fov)
        cam = np.array([[x0, -x0 * t], [x1, -x1 * t], [x1, x1 * t], [x0, x0 * t]])
        return self.to_vehicle_xy(cam)

    def scale_factors(self) -> tuple[float, float]:
        """``s_u, s_v`` of the reciprocal box law for a small cone."""
        r, h = CONE_SHAPE[ClassLabel.SMALL_BLUE]
        return self.f * 2 * r, self.f * h

    def calibration_pairs(self, n: int, rng: np.random.Generator, pixel_noise: float = 0.0):
        """Ground positions inside the FOV band and the pixel of a cone centre placed there."""
        x0, x1 = self.x_range
        x = rng.uniform(x0, x1, n)
        t = math.tan(self.half_fov)
        y = rng.uniform(-1.0, 1.0, n) * x * t
        ground = self.to_vehicle_xy(np.stack([x, y], axis=1))
        uv = self.project(np.column_stack([ground, np.full(n, CONE_CENTER_Z)]))
        if pixel_noise > 0:
            uv = uv + rng.normal(0.0, pixel_noise, uv.shape)
        return ground, uv

    def calibrate(self, degree: int = 3, n: int = 400, seed: int = 7) -> tuple[CameraModel, float]:
        ground, uv = self.calibration_pairs(n, np.random.default_rng(seed))
        fit = fit_projection(ground, uv, degree)
        s_u, s_v = self.scale_factors()
        model = CameraModel(degree, fit.coeffs, s_u, s_v, (self.width, self.height), self.fov_polygon(), self.name)
        return model, fit.rms

    def render(self, cone_body_xy: np.ndarray, colors, timestamp: float = 0.0,
               rng: np.random.Generator | None = None, pixel_noise: float = 0.0) -> SyntheticImage:
        """Flat-coloured trapezoids for every cone in front of the camera, far ones first."""
        img = SyntheticImage(_blank_pixels(self.width, self.height).copy(), timestamp)
        px = img.pixels
        n = len(cone_body_xy)
        if n == 0:
            return img
        cam = self.to_camera(np.column_stack([cone_body_xy, np.zeros(n)]))
        X, Y, Z = cam.T
        radius = np.array([CONE_SHAPE[c][0] for c in colors])
        height = np.array([CONE_SHAPE[c][1] for c in colors])
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx - self.f * Y / X
            v1 = self.cy - self.f * Z / X
            v0 = self.cy - self.f * (Z + height) / X
            half_w = self.f * radius / X
        vis = (X >= 0.5) & (u + half_w >= 0) & (u - half_w < self.width) & (v0 < self.height) & (v1 > 0)
        idx = np.flatnonzero(vis)
        if rng is not None and pixel_noise > 0:
            # one draw per visible cone keeps the stream independent of cones out of view
            noise = rng.normal(0.0, pixel_noise, (len(idx), 2))
            u[idx] += noise[:, 0]
            v0[idx] += noise[:, 1]
            v1[idx] += noise[:, 1]
        for i in idx[np.argsort(-X[idx], kind="stable")]:
            r0 = max(int(math.floor(v0[i])), 0)
            r1 = min(int(math.ceil(v1[i])), self.height)
            if r1 <= r0:
                continue
            rows = np.arange(r0, r1) + 0.5
            # width tapers to 30 % at the tip
            frac = np.clip((rows - v0[i]) / max(v1[i] - v0[i], 1e-9), 0.0, 1.0)
            hw = half_w[i] * (0.3 + 0.7 * frac)
            c0 = np.clip(np.floor(u[i] - hw).astype(int), 0, self.width)
            c1 = np.clip(np.ceil(u[i] + hw).astype(int), 0, self.width)
            rgb = CONE_RGB[colors[i]]
            for r, a, b in zip(range(r0, r1), c0, c1):
                if b > a:
                    px[r, a:b] = rgb
        return img


@lru_cache(maxsize=8)
def _blank_pixels(width: int, height: int) -> np.ndarray:
    px = SyntheticImage.blank(width, height).pixels
    px.flags.writeable = False
    return px


DEFAULT_CAMERAS = (
    PinholeCamera("near", 250.0, (3.0, 8.0), math.radians(40)),
    PinholeCamera("mid", 500.0, (8.0, 18.0), math.radians(35)),
    PinholeCamera("far", 1000.0, (18.0, 42.0), math.radians(22)),
    PinholeCamera("left", 300.0, (4.0, 12.0), math.radians(28), yaw=math.radians(55)),
    PinholeCamera("right", 300.0, (4.0, 12.0), math.radians(28), yaw=math.radians(-55)),
)
