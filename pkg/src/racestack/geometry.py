"""Planar/spatial primitives shared by the whole stack.

Conventions: heading ``psi`` is measured counterclockwise from world +x,
body +x points forward, body +y to the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into the half-open interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    r = theta - TWO_PI * math.floor((theta + math.pi) / TWO_PI)
    # r is in [-pi, pi); move the lower boundary to +pi
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("cannot wrap non-finite angles")
    r = theta - TWO_PI * np.floor((theta + np.pi) / TWO_PI)
    return np.where(r <= -np.pi, r + TWO_PI, r)


def rot2(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose2D:
    """Planar pose; ``psi`` is wrapped on construction."""

    x: float
    y: float
    psi: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("pose position must be finite")
        object.__setattr__(self, "psi", wrap_angle(float(self.psi)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def shifted(self, forward: float) -> "Pose2D":
        """Pose of a point ``forward`` meters ahead along the body x axis."""
        return Pose2D(
            self.x + forward * math.cos(self.psi),
            self.y + forward * math.sin(self.psi),
            self.psi,
        )


@dataclass(frozen=True)
class RigidTransform3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation is a reflection (det = -1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform3":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform3":
        return cls(rot_z(yaw), np.asarray(translation, dtype=float))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform3") -> "RigidTransform3":
        """Return ``self * other`` (apply ``other`` first)."""
        return RigidTransform3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def transform_points(cloud, tf: RigidTransform3):
    """Apply ``tf`` to a :class:`~racestack.perception.PointCloud` or an (n, 3) array."""
    pts = getattr(cloud, "points", None)
    if pts is None:
        return tf.apply(cloud)
    return cloud.with_points(tf.apply(pts))


def world_to_body(pose: Pose2D, p) -> np.ndarray:
    """Express world point(s) ``p`` in the body frame of ``pose``: R(psi)^-1 (p - pos)."""
    p = np.asarray(p, dtype=float)
    d = p - pose.position
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    # rows of R^T
    bx = c * d[..., 0] + s * d[..., 1]
    by = -s * d[..., 0] + c * d[..., 1]
    return np.stack([bx, by], axis=-1)


def body_to_world(pose: Pose2D, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    wx = c * p[..., 0] - s * p[..., 1] + pose.x
    wy = s * p[..., 0] + c * p[..., 1] + pose.y
    return np.stack([wx, wy], axis=-1)


def segments_intersect(p0, p1, a, b) -> np.ndarray:
    """Whether segment p0-p1 properly crosses any of the segments a[i]-b[i]."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)

    def cross(o, u, v):
        return (u[..., 0] - o[..., 0]) * (v[..., 1] - o[..., 1]) - (u[..., 1] - o[..., 1]) * (
            v[..., 0] - o[..., 0]
        )

    d1 = cross(a, b, p0[None, :])
    d2 = cross(a, b, p1[None, :])
    d3 = cross(p0[None, :], p1[None, :], a)
    d4 = cross(p0[None, :], p1[None, :], b)
    return (d1 * d2 < 0.0) & (d3 * d4 < 0.0)
