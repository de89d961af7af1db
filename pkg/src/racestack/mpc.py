"""Linear time-varying MPC steering controller on a dynamic bicycle model.

State ``x = [y, v_y, psi, r]`` in a frame anchored at the current centre of
gravity pose; input is the steering angle, optimised through its rate.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, expm

from .geometry import Pose2D, wrap_angles

log = logging.getLogger(__name__)


class FactorizationError(LinAlgError):
    pass


@dataclass(frozen=True)
class BicycleParams:
    m: float = 200.0
    I_z: float = 120.0
    l_f: float = 0.8
    l_r: float = 0.8
    C_f: float = -50_000.0
    C_r: float = -50_000.0

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.C_f < 0 and self.C_r < 0):
            raise ValueError("cornering stiffnesses must be negative (C_f, C_r < 0)")


@dataclass
class LinearModel:
    A: np.ndarray
    b: np.ndarray
    v_x: float


@dataclass
class DiscreteModel:
    Ad: np.ndarray
    bd: np.ndarray
    T: float
    delay_states: int = 0

    @property
    def n(self) -> int:
        return self.Ad.shape[0]


@dataclass
class MpcConfig:
    N: int = 65
    T: float = 0.02
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 0.0, 50.0, 1.0]))
    R: float = 500.0
    P_term: np.ndarray | None = None
    t_D: float = 0.0
    du_min: float = -0.05
    du_max: float = 0.05
    u_min: float = -0.45
    u_max: float = 0.45
    v_min: float = 1.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if self.P_term is None:
            self.P_term = 5.0 * self.Q
        self.P_term = np.asarray(self.P_term, dtype=float)
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not self.T > 0:
            raise ValueError("sampling time T must be positive")
        if not self.R > 0:
            raise ValueError("input-rate weight R must be positive")
        if self.t_D < 0:
            raise ValueError("delay t_D must be non-negative")
        for name, W in (("Q", self.Q), ("P_term", self.P_term)):
            if W.shape != (4, 4) or not np.allclose(W, W.T) or np.linalg.eigvalsh(W)[0] < -1e-12:
                raise ValueError(f"{name} must be a symmetric PSD 4x4 matrix")


@dataclass
class MpcSolution:
    du_seq: np.ndarray
    u_seq: np.ndarray  # u_1 .. u_{N+1}
    x_pred: np.ndarray  # x_1 .. x_{N+1} (augmented)
    cost: float
    residual: float = 0.0


def dynamics_nonlinear(state, delta: float, v_x: float, p: BicycleParams) -> np.ndarray:
    """Time derivative of ``(y, v_y, psi, r)`` under the linear-tyre bicycle model."""
    if v_x <= 0.1:
        raise ValueError(f"v_x = {v_x:.3f} m/s is below the 0.1 m/s floor of the slip-angle model")
    y, vy, psi, r = state
    a_f = -delta + math.atan((vy + p.l_f * r) / v_x)
    a_r = math.atan((vy - p.l_r * r) / v_x)
    F_f = p.C_f * a_f
    F_r = p.C_r * a_r
    Mz = p.l_f * F_f * math.cos(delta) - p.l_r * F_r
    return np.array([
        v_x * math.sin(psi) + vy * math.cos(psi),
        (F_f * math.cos(delta) + F_r) / p.m - v_x * r,
        r,
        Mz / p.I_z,
    ])


def linearize(p: BicycleParams, v_x: float, v_min: float = 1.0) -> LinearModel:
    """Jacobians about straight-line driving at speed ``v_x``."""
    if v_x <= v_min:
        raise ValueError(f"v_x = {v_x:.3f} m/s must exceed v_min = {v_min} m/s")
    v = v_x
    m, Iz, lf, lr, Cf, Cr = p.m, p.I_z, p.l_f, p.l_r, p.C_f, p.C_r
    A = np.array([
        [0.0, 1.0, v, 0.0],
        [0.0, (Cf + Cr) / (m * v), 0.0, (lf * Cf - lr * Cr) / (m * v) - v],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, (lf * Cf - lr * Cr) / (Iz * v), 0.0, (lf**2 * Cf + lr**2 * Cr) / (Iz * v)],
    ])
    b = np.array([0.0, -Cf / m, 0.0, -lf * Cf / Iz])
    return LinearModel(A, b, v)


def discretize(model: LinearModel, T: float) -> DiscreteModel:
    """Exact zero-order-hold discretisation via the exponential of ``[[A, b], [0, 0]]``."""
    if not T > 0:
        raise ValueError("T must be positive")
    n = model.A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = model.A
    M[:n, n] = model.b
    E = expm(M * T)
    return DiscreteModel(E[:n, :n], E[:n, n].copy(), T, 0)


def delay_split(t_D: float, T: float) -> tuple[int, float]:
    """``(d, rho)`` with ``t_D = (d + rho) T`` and ``0 <= rho < 1``."""
    q = t_D / T
    d = int(math.floor(q + 1e-9))
    rho = max(q - d, 0.0)
    if rho < 1e-9:
        rho = 0.0
    return d, rho


def augment_delay(model: DiscreteModel, t_D: float) -> DiscreteModel:
    """Append a transport chain of ``floor(t_D / T) + 1`` past inputs.

    Chain entry ``c_j`` holds the input issued ``j`` steps ago. The plant sees
    ``(1 - rho) u_{k-d} + rho u_{k-d-1}`` where ``t_D = (d + rho) T``.
    """
    if t_D < 0:
        raise ValueError("t_D must be non-negative")
    if t_D == 0:
        return model
    if model.delay_states:
        raise ValueError("model already carries a delay chain")
    n = model.n
    d, rho = delay_split(t_D, model.T)
    c = d + 1
    A = np.zeros((n + c, n + c))
    b = np.zeros(n + c)
    A[:n, :n] = model.Ad
    # weight of u_{k-d}: the current input when d == 0, else chain entry d
    if d == 0:
        b[:n] += (1.0 - rho) * model.bd
    else:
        A[:n, n + d - 1] += (1.0 - rho) * model.bd
    A[:n, n + d] += rho * model.bd
    b[n] = 1.0
    for j in range(1, c):
        A[n + j, n + j - 1] = 1.0
    return DiscreteModel(A, b, model.T, c)


def build_reference(path, profile, pose: Pose2D, v_x: float, N: int, T: float):
    """Reference states ``x_ref_1 .. x_ref_{N+1}`` in the frame anchored at ``pose``.

    Step k sits at arc length ``s0 + (k - 1) v_x T`` along the path. Returns
    ``(x_ref (N+1, 4), truncated)``; beyond the end of an open path the
    reference holds the last sample and ``truncated`` is set.
    """
    s0 = path.project(pose.position)
    s = s0 + np.arange(N + 1) * v_x * T
    truncated = (not path.closed) and bool(s[-1] > path.s[-1] + 1e-9)
    xy, heading, kappa = path.interpolate(s)
    d = xy - pose.position
    c, sn = math.cos(pose.psi), math.sin(pose.psi)
    lat = -sn * d[:, 0] + c * d[:, 1]
    ref = np.zeros((N + 1, 4))
    ref[:, 0] = lat
    # unwrap so the heading reference is continuous over the horizon
    ref[:, 2] = np.unwrap(wrap_angles(heading - pose.psi))
    ref[:, 2] -= 2 * np.pi * np.round(ref[0, 2] / (2 * np.pi))
    ref[:, 3] = kappa * v_x
    return ref, truncated


def _pad(W: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n))
    out[:4, :4] = W
    return out


def prediction_matrices(d: DiscreteModel, N: int):
    """Powers ``A^k`` (k = 0..N) and partial sums ``S_m = sum_{p<=m} A^p b``."""
    n = d.n
    P = np.empty((N + 1, n, n))
    P[0] = np.eye(n)
    for k in range(1, N + 1):
        P[k] = d.Ad @ P[k - 1]
    Ab = P @ d.bd  # (N+1, n)
    S = np.cumsum(Ab, axis=0)
    return P, S


def condense(d: DiscreteModel, cfg: MpcConfig, x1, u1: float, x_ref):
    """Dense QP ``(H, g)`` in ``du_1 .. du_N`` for the tracking problem.

    ``x_{k+1} = Ad x_k + bd u_k``, ``u_1 = u1`` and ``u_{k+1} = u_k + du_k``;
    the cost sums ``||x_k - x_ref_k||_Q^2 + R du_k^2`` for k = 1..N plus the
    terminal ``||x_{N+1} - x_ref_{N+1}||_P^2``. Returns ``(H, g, const, M, free)``
    with ``cost(du) = 0.5 du'H du + g'du + const`` and the stacked
    ``x_2 .. x_{N+1} = free + M du``.
    """
    N, n = cfg.N, d.n
    x1 = np.asarray(x1, dtype=float).reshape(n)
    ref = np.zeros((N + 1, n))
    xr = np.asarray(x_ref, dtype=float)
    ref[:, : xr.shape[1]] = xr
    P, S = prediction_matrices(d, N)
    # free response x_k = A^{k-1} x1 + S_{k-2} u1, k = 2..N+1
    free = np.einsum("kij,j->ki", P[1:], x1) + S[:N] * u1
    # du_j moves u_{j+1..N}; x_k picks up S_{k-j-2} for k >= j+2
    M = np.zeros((N, n, N))
    for j in range(N - 1):
        M[j + 1:, :, j] = S[: N - 1 - j]
    Qa, Pa = _pad(cfg.Q, n), _pad(cfg.P_term, n)
    W = np.broadcast_to(Qa, (N, n, n)).copy()
    W[-1] = Pa
    e = free - ref[1:]
    WM = np.einsum("kij,kjl->kil", W, M)
    H = 2.0 * (cfg.R * np.eye(N) + np.einsum("kil,kim->lm", M, WM))
    H = 0.5 * (H + H.T)
    g = 2.0 * np.einsum("kil,ki->l", WM, e)
    e1 = x1 - ref[0]
    const = float(e1 @ _pad(cfg.Q, n) @ e1 + np.einsum("ki,kij,kj->", e, W, e))
    return H, g, const, M.reshape(N * n, N), free


def solve_unconstrained(H, g) -> np.ndarray:
    """Solve ``H du = -g`` by Cholesky factorisation.

    Raises:
        FactorizationError: when H is not positive definite; the message
            names the leading minor that failed.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    try:
        c = cho_factor(H, lower=True, check_finite=True)
    except LinAlgError as exc:
        k = _failed_minor(H)
        raise FactorizationError(f"Hessian not positive definite: leading minor of order {k} fails") from exc
    return cho_solve(c, -g)


def _failed_minor(H) -> int:
    for k in range(1, len(H) + 1):
        try:
            np.linalg.cholesky(H[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return len(H)


def rollout_cost(d: DiscreteModel, cfg: MpcConfig, x1, u1: float, x_ref, du) -> float:
    """Cost of a rate sequence by explicit forward simulation."""
    n = d.n
    ref = np.zeros((cfg.N + 1, n))
    xr = np.asarray(x_ref, dtype=float)
    ref[:, : xr.shape[1]] = xr
    Qa, Pa = _pad(cfg.Q, n), _pad(cfg.P_term, n)
    x = np.asarray(x1, dtype=float).copy()
    u = u1
    J = 0.0
    for k in range(cfg.N):
        e = x - ref[k]
        J += e @ Qa @ e + cfg.R * du[k] ** 2
        x = d.Ad @ x + d.bd * u
        u = u + du[k]
    e = x - ref[cfg.N]
    return float(J + e @ Pa @ e)


@dataclass
class MpcStepInfo:
    u_out: float
    du1: float = 0.0
    cost: float = float("nan")
    residual: float = float("nan")
    truncated: bool = False
    saturated: bool = False
    held: bool = False
    error: str = ""
    x_pred: np.ndarray | None = None


def model_for_speed(p: BicycleParams, cfg: MpcConfig, v_x: float) -> DiscreteModel:
    return augment_delay(discretize(linearize(p, v_x, cfg.v_min), cfg.T), cfg.t_D)


def mpc_step(pose_cg: Pose2D, lateral, path, profile, cfg: MpcConfig, p: BicycleParams,
             last_u: float, past_u=()) -> MpcStepInfo:
    """One receding-horizon step; returns the steering command ``u_2 = last_u + du_1``.

    ``lateral`` is ``(v_x, v_y, r)``; ``past_u`` lists earlier commands, most
    recent first (the ones issued before ``last_u``), to seed the delay chain.
    Below ``cfg.v_min`` or on any numerical failure the last command is held.
    """
    v_x, v_y, r = lateral
    if v_x < cfg.v_min:
        return MpcStepInfo(last_u, held=True, error="below v_min")
    try:
        d = model_for_speed(p, cfg, v_x)
        x_ref, truncated = build_reference(path, profile, pose_cg, v_x, cfg.N, cfg.T)
        x1 = np.zeros(d.n)
        x1[:4] = [0.0, v_y, 0.0, r]
        past = list(past_u)
        for j in range(d.delay_states):
            x1[4 + j] = past[j] if j < len(past) else last_u
        H, g, const, M, free = condense(d, cfg, x1, last_u, x_ref)
        du = solve_unconstrained(H, g)
    except (ValueError, LinAlgError) as exc:
        log.warning("MPC step failed, holding steering: %s", exc)
        return MpcStepInfo(last_u, held=True, error=str(exc))
    residual = float(np.max(np.abs(H @ du + g)))
    cost = float(0.5 * du @ H @ du + g @ du + const)
    u = last_u + du[0]
    sat = not (cfg.u_min <= u <= cfg.u_max)
    if sat:
        log.debug("steering %.3f saturated to [%.3f, %.3f]", u, cfg.u_min, cfg.u_max)
        u = min(max(u, cfg.u_min), cfg.u_max)
    x_pred = np.vstack([x1, free + (M @ du).reshape(cfg.N, -1)])
    return MpcStepInfo(u, float(du[0]), cost, residual, truncated, sat, False, "", x_pred)


class LateralMpc:
    """Stateful wrapper keeping the command history for the delay chain."""

    def __init__(self, cfg: MpcConfig | None = None, params: BicycleParams | None = None):
        self.cfg = cfg or MpcConfig()
        self.params = params or BicycleParams()
        self.last_u = 0.0
        self._past: deque = deque(maxlen=16)
        self.trace: list[tuple] = []

    def step(self, t: float, pose_cg: Pose2D, lateral, path, profile) -> MpcStepInfo:
        info = mpc_step(pose_cg, lateral, path, profile, self.cfg, self.params, self.last_u, self._past)
        self._past.appendleft(self.last_u)
        self.last_u = info.u_out
        self.trace.append((t, lateral[0], info.du1, info.u_out, info.cost, info.residual, int(info.truncated)))
        return info

    def write_trace(self, path: str | Path) -> None:
        write_trace_csv(path, self.trace)


TRACE_COLUMNS = ["t", "v_x", "du_1", "u_out", "cost", "residual", "truncated"]


def write_trace_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in row])
