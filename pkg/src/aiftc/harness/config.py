"""Scenario configuration: nested dataclasses, JSON round trip and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ConfigError
from ..plant import CameraParams, FaultSpec, ManipulatorParams, NoiseParams

SCHEMA_VERSION = 1


@dataclass
class PlantConfig:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    friction: list = field(default_factory=lambda: [0.5, 0.5])
    g: float = 9.81

    def build(self) -> ManipulatorParams:
        return ManipulatorParams(self.m1, self.m2, self.l1, self.l2, tuple(self.friction), self.g)


@dataclass
class CameraConfig:
    k1: float = -0.08
    k2: float = 0.005
    center: list = field(default_factory=lambda: [1.2, -1.0])
    workspace_radius: float = 2.0

    def build(self) -> CameraParams:
        return CameraParams(self.k1, self.k2, tuple(self.center), self.workspace_radius)


@dataclass
class NoiseConfig:
    sigma_q: float = 0.001
    sigma_qd: float = 0.001
    sigma_v: float = 0.01

    def build(self, seed: int) -> NoiseParams:
        return NoiseParams(self.sigma_q, self.sigma_qd, self.sigma_v, seed)


@dataclass
class UAICConfig:
    kp: list = field(default_factory=lambda: [50.0, 30.0])
    ki: list = field(default_factory=lambda: [30.0, 20.0])
    kd: list = field(default_factory=lambda: [25.0, 15.0])
    integral_limit: float = 3.0
    torque_limit: float = 200.0
    # p_x makes kappa_mu*dt*p_x = 1; sensor precisions set the per-step correction gains
    p_yq: float = 1e5
    p_yqd: float = 4e6
    p_yv: float = 1e4
    p_x: float = 2e7
    p_u: float = 1.0
    kappa_mu: float = 5e-5
    kappa_u: float = 500.0
    exact_coupling: bool = True


@dataclass
class AICConfig:
    kappa_mu: float = 20.0
    kappa_u: float = 500.0
    p_yq: float = 1.0
    p_yqd: float = 1.0
    p_yv: float = 1.0
    p_mu: float = 1.0
    p_mu1: float = 1.0
    torque_limit: float = 50.0


@dataclass
class FDIConfig:
    alpha: float = 0.01
    use_squared: bool = True
    confirm_steps: int = 5
    isolation_window: int = 50
    smoothing: int = 100
    kappa_p: float = 5e-6
    kappa_v: float = 1e-3
    calibration_runs: int = 200
    min_runs: int = 100
    stationary_window: int = 1000
    plateau_window: int = 200
    zero_velocity_precision: bool = False


@dataclass
class GPRConfig:
    q1_range: list = field(default_factory=lambda: [-1.85, 0.25])
    q2_range: list = field(default_factory=lambda: [-0.35, 0.85])
    grid: int = 21
    noise: float = 0.01
    seed: int = 5
    signal_var: float = 1.0
    noise_var: float = 1e-4
    theta: list = field(default_factory=lambda: [1.0, 1.0])
    restarts: int = 1
    max_iter: int = 100


@dataclass
class FaultConfig:
    kind: str = "none"
    time: float = 8.0
    joint: int = 1
    bias: float = 0.04

    def build(self) -> FaultSpec:
        return FaultSpec(self.kind, self.time, self.joint, self.bias)


@dataclass
class ScenarioConfig:
    controller: str = "uaic"
    dt: float = 1e-3
    duration: float = 16.0
    q0: list = field(default_factory=lambda: [-np.pi / 2, 0.0])
    waypoints: list = field(default_factory=lambda: [[-0.2, 0.5], [-0.6, 0.2]])
    switch_times: list = field(default_factory=lambda: [0.0, 6.0])
    seed: int = 0
    recovery: bool = True
    detection: bool = True
    plant: PlantConfig = field(default_factory=PlantConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    uaic: UAICConfig = field(default_factory=UAICConfig)
    aic: AICConfig = field(default_factory=AICConfig)
    fdi: FDIConfig = field(default_factory=FDIConfig)
    gpr: GPRConfig = field(default_factory=GPRConfig)
    fault: FaultConfig = field(default_factory=FaultConfig)
    gpr_path: str = "artifacts/gpr.npz"
    calibration_path: str = "artifacts/calibration.npz"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.controller not in ("aic", "uaic"):
            raise ConfigError("controller must be 'aic' or 'uaic'")
        if not self.dt > 0 or not self.duration > 0:
            raise ConfigError("dt and duration must be positive")
        if len(self.waypoints) != len(self.switch_times) or not self.waypoints:
            raise ConfigError("need one switch time per waypoint")
        if self.switch_times[0] != 0.0 or any(np.diff(self.switch_times) <= 0):
            raise ConfigError("switch times must start at 0 and increase")
        if self.fault.kind != "none" and not self.duration > self.fault.time:
            raise ConfigError("duration must exceed the fault time")
        if not 0 < self.fdi.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        try:
            self.fault.build()
            self.plant.build()
            self.noise.build(self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def target_schedule(self) -> np.ndarray:
        """Per-step target (steps, 2)."""
        t = np.arange(self.steps) * self.dt
        idx = np.searchsorted(np.asarray(self.switch_times), t + 0.5 * self.dt, side="right") - 1
        return np.asarray(self.waypoints, dtype=float)[idx]

    def switch_steps(self) -> list[int]:
        return [int(round(s / self.dt)) for s in self.switch_times]

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with top-level or dotted (``"fdi.alpha"``) fields changed."""
        d = to_dict(self)
        for key, value in changes.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[parts[-1]] = value
        return from_dict(d)


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def _build(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {path or 'config'}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        sub = _NESTED.get(ftype)
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_NESTED = {c.__name__: c for c in (PlantConfig, CameraConfig, NoiseConfig, UAICConfig, AICConfig,
                                   FDIConfig, GPRConfig, FaultConfig)}


def from_dict(data: dict) -> ScenarioConfig:
    return _build(ScenarioConfig, data)


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def save_config(cfg: ScenarioConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")


# fields that do not change healthy residual statistics
_NOT_HASHED = ("seed", "fault", "recovery", "detection", "gpr_path", "calibration_path")


def calibration_key(cfg: ScenarioConfig, gpr_model=None) -> str:
    """Hash of everything that shapes healthy residuals (and the GPR weights)."""
    d = to_dict(cfg)
    for k in _NOT_HASHED:
        d.pop(k)
    for k in ("alpha", "use_squared", "confirm_steps", "isolation_window", "calibration_runs",
              "min_runs", "zero_velocity_precision"):
        d["fdi"].pop(k)
    h = hashlib.sha256(json.dumps(d, sort_keys=True).encode())
    if gpr_model is not None:
        h.update(np.ascontiguousarray(gpr_model.alpha).tobytes())
    return h.hexdigest()[:16]


__all__ = ["ScenarioConfig", "PlantConfig", "CameraConfig", "NoiseConfig", "UAICConfig", "AICConfig",
           "FDIConfig", "GPRConfig", "FaultConfig", "load_config", "save_config", "to_dict",
           "from_dict", "calibration_key", "SCHEMA_VERSION"]
