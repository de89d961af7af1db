"""Scenario files (JSON or TOML) validated into a typed configuration tree."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LidarSettings(_Model):
    range: float = Field(42.0, gt=0)
    noise: float = Field(0.01, ge=0)
    drop_prob: float = Field(0.05, ge=0, lt=1)
    density: float = Field(800.0, gt=0)
    ground_points: int = Field(40, ge=0)
    rate: float = Field(20.0, gt=0)
    latency_min: float = Field(0.004, ge=0)
    latency_jitter: float = Field(0.004, ge=0)
    latency_spike_prob: float = Field(0.15, ge=0, le=1)
    latency_spike_max: float = Field(0.04, ge=0)
    async_trigger: bool = False


class OdometrySettings(_Model):
    wheel_sigma: float = Field(0.02, ge=0)
    yaw_sigma: float = Field(0.005, ge=0)
    yaw_bias: float = 0.0
    rate: float = Field(100.0, gt=0)


class CameraSettings(_Model):
    enabled: bool = True
    pixel_noise: float = Field(0.5, ge=0)
    degree: int = Field(3, ge=0)


class SensorSettings(_Model):
    lidar: LidarSettings = LidarSettings()
    odometry: OdometrySettings = OdometrySettings()
    camera: CameraSettings = CameraSettings()
    v_y_sigma: float = Field(0.02, ge=0)


class VehicleSettings(_Model):
    m: float = Field(200.0, gt=0)
    I_z: float = Field(120.0, gt=0)
    l_f: float = Field(0.8, gt=0)
    l_r: float = Field(0.8, gt=0)
    C_f: float = Field(-50_000.0, lt=0)
    C_r: float = Field(-50_000.0, lt=0)
    mu: float = Field(1.5, gt=0)
    c_drag: float = Field(0.6, ge=0)
    tau_steer: float = Field(0.05, gt=0)
    t_delay: float = Field(0.03, ge=0)
    delta_max: float = Field(0.45, gt=0)
    r_dyn: float = Field(0.2, gt=0)
    track_width: float = Field(1.2, gt=0)


class PerceptionSettings(_Model):
    dbscan_eps: float = Field(0.3, gt=0)
    dbscan_min_points: int = Field(3, ge=1)
    max_variance: tuple[float, float, float] = (0.05, 0.05, 0.05)
    eps1: float = Field(0.25, gt=0)
    eps2: float = Field(2.25, gt=0)
    max_range: float = Field(42.0, gt=0)

    @field_validator("eps2")
    @classmethod
    def _eps_order(cls, v, info):
        e1 = info.data.get("eps1")
        if e1 is not None and not v > e1:
            raise ValueError("eps2 must exceed eps1")
        return v


class LocalizationSettings(_Model):
    association: Literal["jcbb", "icnn"] = "jcbb"
    n_confirm: int = Field(2, ge=2)
    gate_radius: float = Field(0.5, gt=0)
    individual_gate: float = Field(0.95, gt=0, lt=1)
    joint_gate: float = Field(0.99, gt=0, lt=1)
    max_nodes: int = Field(100_000, ge=1)
    meas_sigma: float = Field(0.15, gt=0)
    wheel_sigma: float = Field(0.05, gt=0)
    yaw_sigma: float = Field(0.01, gt=0)
    extra_process: tuple[float, float, float] = (0.05, 0.05, 0.002)
    use_colors: bool = True


class GgsSettings(_Model):
    file: str | None = None
    a_lat: float = Field(10.0, gt=0)
    power: float = Field(40e3, gt=0)
    c_drag: float = Field(0.6, ge=0)


class PlannerSettings(_Model):
    lookahead: float = Field(40.0, gt=0)
    spacing: float = Field(0.5, gt=0)
    profile_scale: float = Field(0.82, gt=0, le=1)
    v_cap: float = Field(20.0, gt=0)
    v_floor: float = Field(1.0, gt=0)
    preview_time: float = Field(0.2, ge=0)
    ggs: GgsSettings = GgsSettings()


class MpcSettings(_Model):
    N: int = Field(65, ge=1)
    T: float = Field(0.02, gt=0)
    Q: tuple[float, float, float, float] = (10.0, 0.0, 50.0, 1.0)
    R: float = Field(500.0, gt=0)
    P_scale: float = Field(5.0, ge=0)
    t_D: float = Field(0.08, ge=0)
    u_min: float = -0.45
    u_max: float = 0.45
    v_min: float = Field(1.0, gt=0)


class PiSettings(_Model):
    k_p: float = Field(600.0, ge=0)
    k_i: float = Field(150.0, ge=0)
    i_min: float = Field(-1500.0, le=0)
    i_max: float = Field(1500.0, ge=0)
    ff_coeffs: tuple[float, float, float] = (0.0, 0.0, 0.6)
    f_min: float = -3000.0
    f_max: float = 2500.0


class TerminationSettings(_Model):
    laps: int = Field(2, ge=1)
    max_time: float = Field(240.0, gt=0)
    max_distance: float = Field(5000.0, gt=0)
    warmup_max: float = Field(10.0, ge=0)


class ScenarioConfig(_Model):
    name: str = "scenario"
    track: str = "oval"
    seed: int = 0
    control_rate: float = Field(50.0, gt=0)
    plant_dt: float = Field(0.0025, gt=0, le=0.005)
    sensors: SensorSettings = SensorSettings()
    vehicle: VehicleSettings = VehicleSettings()
    perception: PerceptionSettings = PerceptionSettings()
    localization: LocalizationSettings = LocalizationSettings()
    planner: PlannerSettings = PlannerSettings()
    mpc: MpcSettings = MpcSettings()
    pi: PiSettings = PiSettings()
    termination: TerminationSettings = TerminationSettings()

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return ScenarioConfig.model_validate({**self.model_dump(), **kw})


class ScenarioError(ValueError):
    """Invalid scenario; the message names each offending field path."""


def _format(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_scenario(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ScenarioError(_format(exc)) from None


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ScenarioError(f"{path}: cannot parse scenario file: {exc}") from None
    return parse_scenario(data)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2)
