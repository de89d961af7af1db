"""Nonlinear single-track plant with saturating tyres and a lagged, delayed steering actuator."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import Pose2D, wrap_angle
from ..mpc import BicycleParams

G = 9.81


@dataclass(frozen=True)
class PlantParams:
    bicycle: BicycleParams = field(default_factory=BicycleParams)
    mu: float = 1.5
    c_drag: float = 0.6  # F = c v^2
    tau_steer: float = 0.05
    t_delay: float = 0.03
    delta_max: float = 0.45
    track_width: float = 1.2
    r_dyn: float = 0.2
    v_kinematic: float = 1.0  # below this speed a kinematic model is integrated
    saturating_tires: bool = True

    def peak_forces(self) -> tuple[float, float]:
        p = self.bicycle
        L = p.l_f + p.l_r
        w = self.mu * p.m * G
        return w * p.l_r / L, w * p.l_f / L

    def drag(self, v: float) -> float:
        return self.c_drag * v * abs(v)


@dataclass(frozen=True)
class PlantState:
    """Centre-of-gravity pose and body-frame velocities."""

    pose: Pose2D
    v_x: float
    v_y: float = 0.0
    r: float = 0.0
    delta_actual: float = 0.0

    def rear_axle(self, l_r: float) -> Pose2D:
        return self.pose.shifted(-l_r)

    def as_array(self) -> np.ndarray:
        return np.array([self.pose.x, self.pose.y, self.pose.psi, self.v_x, self.v_y, self.r, self.delta_actual])

    @classmethod
    def from_array(cls, a) -> "PlantState":
        return cls(Pose2D(a[0], a[1], a[2]), float(a[3]), float(a[4]), float(a[5]), float(a[6]))


def tire_force(C: float, alpha: float, F_peak: float, saturating: bool = True) -> float:
    """Lateral force; ``F_peak tanh(C alpha / F_peak)`` tends to ``C alpha`` at small slip."""
    if not saturating:
        return C * alpha
    return F_peak * math.tanh(C * alpha / F_peak)


def derivatives(s: np.ndarray, delta_cmd: float, force: float, prm: PlantParams) -> np.ndarray:
    """d/dt of ``(x, y, psi, v_x, v_y, r, delta)`` for the dynamic model."""
    _, _, psi, vx, vy, r, delta = s
    p = prm.bicycle
    Ff_max, Fr_max = prm.peak_forces()
    a_f = -delta + math.atan2(vy + p.l_f * r, vx)
    a_r = math.atan2(vy - p.l_r * r, vx)
    Fyf = tire_force(p.C_f, a_f, Ff_max, prm.saturating_tires)
    Fyr = tire_force(p.C_r, a_r, Fr_max, prm.saturating_tires)
    cd, sd = math.cos(delta), math.sin(delta)
    c, sn = math.cos(psi), math.sin(psi)
    return np.array([
        vx * c - vy * sn,
        vx * sn + vy * c,
        r,
        (force - Fyf * sd - prm.drag(vx)) / p.m + vy * r,
        (Fyf * cd + Fyr) / p.m - vx * r,
        (p.l_f * Fyf * cd - p.l_r * Fyr) / p.I_z,
        (delta_cmd - delta) / prm.tau_steer,
    ])


def _kinematic_derivatives(s, delta_cmd, force, prm: PlantParams) -> np.ndarray:
    _, _, psi, vx, _, _, delta = s
    p = prm.bicycle
    L = p.l_f + p.l_r
    beta = math.atan(p.l_r / L * math.tan(delta))
    v = vx
    return np.array([
        v * math.cos(psi + beta),
        v * math.sin(psi + beta),
        v * math.cos(beta) * math.tan(delta) / L,
        (force - prm.drag(vx)) / p.m,
        0.0,
        0.0,
        (delta_cmd - delta) / prm.tau_steer,
    ])


def plant_step(state: PlantState, delta_cmd: float, force_cmd: float, dt: float,
               params: PlantParams) -> PlantState:
    """Advance the plant by one RK4 step of ``dt`` (at most 5 ms).

    ``delta_cmd`` is the command currently reaching the actuator (after any
    transport delay); the first-order steering lag is part of the state.
    """
    if not 0.0 < dt <= 0.005 + 1e-12:
        raise ValueError("plant step must satisfy 0 < dt <= 5 ms")
    delta_cmd = min(max(delta_cmd, -params.delta_max), params.delta_max)
    s = state.as_array()
    s[2] = state.pose.psi
    low = s[3] < params.v_kinematic
    f = _kinematic_derivatives if low else derivatives
    k1 = f(s, delta_cmd, force_cmd, params)
    k2 = f(s + 0.5 * dt * k1, delta_cmd, force_cmd, params)
    k3 = f(s + 0.5 * dt * k2, delta_cmd, force_cmd, params)
    k4 = f(s + dt * k3, delta_cmd, force_cmd, params)
    n = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if low:
        p = params.bicycle
        L = p.l_f + p.l_r
        n[3] = max(n[3], 0.0)
        # lateral states follow the kinematic steady state at low speed
        beta = math.atan(p.l_r / L * math.tan(n[6]))
        n[5] = n[3] * math.cos(beta) * math.tan(n[6]) / L
        n[4] = n[5] * p.l_r
    n[2] = wrap_angle(n[2])
    return PlantState.from_array(n)


def kinetic_energy(state: PlantState, params: PlantParams) -> float:
    p = params.bicycle
    return 0.5 * p.m * (state.v_x**2 + state.v_y**2) + 0.5 * p.I_z * state.r**2


def linear_steady_yaw_rate(p: BicycleParams, v_x: float, delta: float) -> float:
    """Steady-state yaw rate of the linearised model for a constant steering angle."""
    from ..mpc import linearize

    lm = linearize(p, v_x, 0.0)
    A = lm.A[np.ix_([1, 3], [1, 3])]
    b = lm.b[[1, 3]]
    x = np.linalg.solve(A, -b * delta)
    return float(x[1])


class SteeringActuator:
    """Pure transport delay on the steering command; the lag lives in the plant."""

    def __init__(self, delay: float, initial: float = 0.0):
        self.delay = delay
        self._queue: deque = deque()
        self._current = initial

    def command(self, t: float, delta: float) -> None:
        self._queue.append((t + self.delay, delta))

    def output(self, t: float) -> float:
        while self._queue and self._queue[0][0] <= t + 1e-12:
            self._current = self._queue.popleft()[1]
        return self._current
