"""Feedforward PI speed controller producing a longitudinal force request."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PiConfig:
    k_p: float = 600.0
    k_i: float = 150.0
    i_min: float = -1500.0
    i_max: float = 1500.0
    ff_coeffs: tuple[float, float, float] = (0.0, 0.0, 0.6)
    f_min: float = -3000.0
    f_max: float = 2500.0

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ValueError("f_min must be below f_max")
        if not self.i_min <= 0.0 <= self.i_max:
            raise ValueError("integrator clamp must bracket zero")

    def feedforward(self, v: float) -> float:
        c0, c1, c2 = self.ff_coeffs
        return c0 + c1 * v + c2 * v * v


@dataclass(frozen=True)
class PiState:
    integrator: float = 0.0
    last_t: float | None = None


def pi_step(state: PiState, v_target: float, v_meas: float, t: float,
            cfg: PiConfig) -> tuple[float, PiState]:
    """One controller update; returns ``(force, new_state)``.

    The integrator is frozen whenever the unclamped output is saturated in the
    direction the error would push it.
    """
    if state.last_t is not None and not t > state.last_t:
        raise ValueError(f"time must increase: t = {t} after {state.last_t}")
    dt = 0.0 if state.last_t is None else t - state.last_t
    e = v_target - v_meas
    base = cfg.feedforward(v_target) + cfg.k_p * e
    raw = base + state.integrator
    integ = state.integrator
    saturated_up = raw >= cfg.f_max and e > 0
    saturated_down = raw <= cfg.f_min and e < 0
    if not (saturated_up or saturated_down):
        integ = min(max(integ + cfg.k_i * e * dt, cfg.i_min), cfg.i_max)
    force = min(max(base + integ, cfg.f_min), cfg.f_max)
    return force, PiState(integ, t)
