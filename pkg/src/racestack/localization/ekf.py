"""Pose EKF driven by rear wheel speeds and yaw rate, corrected by mapped landmarks."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import Pose2D, wrap_angle

log = logging.getLogger(__name__)


class CovarianceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class OdometryInput:
    n_rl: float
    n_rr: float
    psi_dot: float
    timestamp: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.n_rl, self.n_rr, self.psi_dot])


@dataclass(frozen=True)
class VehicleParams:
    r_dyn: float = 0.2
    # "rev/s" or "rad/s"
    wheel_speed_unit: str = "rev/s"

    def __post_init__(self):
        if self.r_dyn <= 0:
            raise ValueError("r_dyn must be positive")
        if self.wheel_speed_unit not in ("rev/s", "rad/s"):
            raise ValueError("wheel_speed_unit must be 'rev/s' or 'rad/s'")

    @property
    def wheel_gain(self) -> float:
        """Per-wheel factor turning a wheel speed into half the axle speed."""
        if self.wheel_speed_unit == "rev/s":
            return math.pi * self.r_dyn
        return 0.5 * self.r_dyn


@dataclass(frozen=True)
class EkfState:
    pose: Pose2D
    covariance: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.covariance, dtype=float)
        if P.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        object.__setattr__(self, "covariance", P)

    @property
    def mean(self) -> np.ndarray:
        return self.pose.as_array()


def input_matrix(psi: float, dt: float, params: VehicleParams) -> np.ndarray:
    """B_k, mapping (n_rl, n_rr, psi_dot) to a state increment over ``dt``."""
    g = params.wheel_gain
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[g * c, g * c, 0.0], [g * s, g * s, 0.0], [0.0, 0.0, 1.0]]) * dt


def motion_jacobian(psi: float, u: OdometryInput, dt: float, params: VehicleParams) -> np.ndarray:
    ds = params.wheel_gain * (u.n_rl + u.n_rr) * dt
    return np.array(
        [[1.0, 0.0, -ds * math.sin(psi)], [0.0, 1.0, ds * math.cos(psi)], [0.0, 0.0, 1.0]]
    )


def motion_model(x: np.ndarray, u: OdometryInput, dt: float, params: VehicleParams) -> np.ndarray:
    """f(x, u) = x + B(psi) u, without angle wrapping."""
    return x + input_matrix(x[2], dt, params) @ u.as_array()


def odometry_process_noise(psi: float, dt: float, params: VehicleParams, input_cov,
                           extra=None) -> np.ndarray:
    """Process noise from wheel-speed / yaw-rate noise: B Sigma_u B^T (+ extra * dt)."""
    B = input_matrix(psi, dt, params)
    Q = B @ np.asarray(input_cov, dtype=float) @ B.T
    if extra is not None:
        Q = Q + np.diag(extra) * dt
    return Q


def _check_psd(P: np.ndarray, what: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)) or np.linalg.eigvalsh(P)[0] < -1e-12:
        raise CovarianceError(f"{what} covariance is not positive semi-definite")
    return P


def predict(state: EkfState, u: OdometryInput, dt: float, params: VehicleParams,
            Q_process) -> EkfState:
    if not dt > 0:
        raise ValueError("prediction step needs dt > 0")
    x = state.mean
    xn = motion_model(x, u, dt, params)
    F = motion_jacobian(x[2], u, dt, params)
    P = F @ state.covariance @ F.T + np.asarray(Q_process, dtype=float)
    return EkfState(Pose2D(xn[0], xn[1], xn[2]), _check_psd(P, "predicted"))


def observe(pose: Pose2D, landmarks) -> np.ndarray:
    """Predicted body-frame positions of every landmark, shape (M, 2)."""
    m = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    d = m - pose.position
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def observation_jacobians(pose: Pose2D, landmarks) -> np.ndarray:
    """d h_i / d(x, y, psi) per landmark, shape (M, 2, 3). Landmarks are held fixed."""
    h = observe(pose, landmarks)
    c, s = math.cos(pose.psi), math.sin(pose.psi)
    H = np.empty((len(h), 2, 3))
    H[:, 0, 0], H[:, 0, 1] = -c, -s
    H[:, 1, 0], H[:, 1, 1] = s, -c
    H[:, 0, 2] = h[:, 1]
    H[:, 1, 2] = -h[:, 0]
    return H


def correct(state: EkfState, measurements, pairs: Sequence[tuple[int, int]], landmarks,
            R_meas) -> tuple[EkfState, bool]:
    """Stacked EKF update over the associated (measurement, landmark) pairs.

    Returns ``(state, applied)``; ``applied`` is False for an empty association
    or when the innovation covariance is singular (the state is then unchanged).
    """
    if not pairs:
        return state, False
    z = np.asarray(measurements, dtype=float).reshape(-1, 2)
    lm = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    mi = np.array([p[0] for p in pairs])
    li = np.array([p[1] for p in pairs])
    if mi.max() >= len(z) or li.max() >= len(lm) or mi.min() < 0 or li.min() < 0:
        raise IndexError("association refers to a missing measurement or landmark")
    pose = state.pose
    h = observe(pose, lm[li])
    H = observation_jacobians(pose, lm[li]).reshape(-1, 3)
    nu = (z[mi] - h).reshape(-1)
    k = len(pairs)
    Rm = np.asarray(R_meas, dtype=float)
    R = np.kron(np.eye(k), Rm) if Rm.shape == (2, 2) else Rm
    P = state.covariance
    S = H @ P @ H.T + R
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        log.warning("singular innovation covariance; correction skipped")
        return state, False
    # K = P H^T S^-1 via two triangular solves
    PHt = P @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    x = state.mean + K @ nu
    IKH = np.eye(3) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    return EkfState(Pose2D(x[0], x[1], wrap_angle(x[2])), _check_psd(Pn, "corrected")), True


def nees(state: EkfState, truth) -> float:
    e = np.asarray(truth, dtype=float) - state.mean
    e[2] = wrap_angle(e[2])
    return float(e @ np.linalg.solve(state.covariance, e))


def read_odometry_csv(path: str | Path) -> list[OdometryInput]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if not cols:
        return []
    missing = [c for c in ("t", "n_rl", "n_rr", "psi_dot") if c not in cols]
    if missing:
        raise ValueError(f"{path}: missing column(s) {', '.join(missing)}; expected t,n_rl,n_rr,psi_dot")
    out = []
    for lineno, r in enumerate(rows, start=2):
        try:
            out.append(OdometryInput(float(r["n_rl"]), float(r["n_rr"]), float(r["psi_dot"]), float(r["t"])))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
