"""Simulated 2-DOF planar arm with encoders, velocity sensors and a distorted camera.

Joint angles are measured from the positive x axis with z pointing up, so
``q = [-pi/2, 0]`` is the arm hanging straight down. Links are uniform rods.
All kinematic/dynamic functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DivergenceError, InvalidInputError, OutOfWorkspaceError

FAULT_KINDS = ("none", "encoder_freeze", "camera_bias")


@dataclass(frozen=True)
class ManipulatorParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    friction: tuple[float, float] = (0.5, 0.5)
    g: float = 9.81

    def __post_init__(self):
        if min(self.m1, self.m2, self.l1, self.l2) <= 0:
            raise InvalidInputError("link masses and lengths must be positive")
        if len(self.friction) != 2 or min(self.friction) < 0:
            raise InvalidInputError("friction must be two nonnegative coefficients")
        if self.g < 0:
            raise InvalidInputError("gravity magnitude must be nonnegative")

    @property
    def D(self) -> np.ndarray:
        return np.diag(np.asarray(self.friction, dtype=float))

    @property
    def reach(self) -> float:
        return self.l1 + self.l2


@dataclass
class PlantState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise InvalidInputError("plant state must be finite")

    def copy(self) -> "PlantState":
        return PlantState(self.q.copy(), self.qd.copy())


@dataclass(frozen=True)
class NoiseParams:
    sigma_q: float = 0.001
    sigma_qd: float = 0.001
    sigma_v: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_q, self.sigma_qd, self.sigma_v) < 0:
            raise InvalidInputError("noise standard deviations must be nonnegative")

    @property
    def scales(self) -> np.ndarray:
        """Per-channel standard deviations in draw order (q1, q2, qd1, qd2, vx, vz)."""
        s = (self.sigma_q, self.sigma_q, self.sigma_qd, self.sigma_qd, self.sigma_v, self.sigma_v)
        return np.array(s, dtype=float)


@dataclass(frozen=True)
class FaultSpec:
    kind: str = "none"
    time: float = 8.0
    joint: int = 1
    bias: float = 0.04

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise InvalidInputError(f"unknown fault kind {self.kind!r}")
        if self.time < 0:
            raise InvalidInputError("fault time must be nonnegative")
        if self.joint not in (1, 2):
            raise InvalidInputError("frozen joint index must be 1 or 2")

    def start_step(self, dt: float) -> int:
        return int(round(self.time / dt))


@dataclass
class SensorReading:
    y_q: np.ndarray
    y_qd: np.ndarray
    y_v: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.y_q = np.asarray(self.y_q, dtype=float)
        self.y_qd = np.asarray(self.y_qd, dtype=float)
        self.y_v = np.asarray(self.y_v, dtype=float)


# ---------------------------------------------------------------------------
# Rigid-body model


def _inertia_terms(p: ManipulatorParams):
    lc1, lc2 = 0.5 * p.l1, 0.5 * p.l2
    i1, i2 = p.m1 * p.l1**2 / 12.0, p.m2 * p.l2**2 / 12.0
    a = p.m1 * lc1**2 + i1 + p.m2 * (p.l1**2 + lc2**2) + i2
    b = p.m2 * p.l1 * lc2
    d = p.m2 * lc2**2 + i2
    return a, b, d


def mass_matrix(q, params: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    a, b, d = _inertia_terms(params)
    c2 = np.cos(q[..., 1])
    M = np.empty(q.shape[:-1] + (2, 2))
    M[..., 0, 0] = a + 2.0 * b * c2
    M[..., 0, 1] = M[..., 1, 0] = d + b * c2
    M[..., 1, 1] = d
    return M


def mass_matrix_dot(q, qd, params: ManipulatorParams) -> np.ndarray:
    """Time derivative of the mass matrix along the trajectory (analytic)."""
    q, qd = np.asarray(q, dtype=float), np.asarray(qd, dtype=float)
    _, b, _ = _inertia_terms(params)
    s2dq2 = -b * np.sin(q[..., 1]) * qd[..., 1]
    Md = np.zeros(q.shape[:-1] + (2, 2))
    Md[..., 0, 0] = 2.0 * s2dq2
    Md[..., 0, 1] = Md[..., 1, 0] = s2dq2
    return Md


def coriolis_matrix(q, qd, params: ManipulatorParams) -> np.ndarray:
    q, qd = np.asarray(q, dtype=float), np.asarray(qd, dtype=float)
    _, b, _ = _inertia_terms(params)
    h = -b * np.sin(q[..., 1])
    C = np.empty(q.shape[:-1] + (2, 2))
    C[..., 0, 0] = h * qd[..., 1]
    C[..., 0, 1] = h * (qd[..., 0] + qd[..., 1])
    C[..., 1, 0] = -h * qd[..., 0]
    C[..., 1, 1] = 0.0
    return C


def gravity_vector(q, params: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    lc1, lc2 = 0.5 * params.l1, 0.5 * params.l2
    c1 = np.cos(q[..., 0])
    c12 = np.cos(q[..., 0] + q[..., 1])
    G = np.empty(q.shape)
    G[..., 1] = params.m2 * lc2 * params.g * c12
    G[..., 0] = (params.m1 * lc1 + params.m2 * params.l1) * params.g * c1 + G[..., 1]
    return G


@lru_cache(maxsize=64)
def _constants(p: ManipulatorParams):
    a, b, d = _inertia_terms(p)
    g2 = p.m2 * 0.5 * p.l2 * p.g
    g1 = (p.m1 * 0.5 * p.l1 + p.m2 * p.l1) * p.g
    return a, b, d, g1, g2, float(p.friction[0]), float(p.friction[1])


def accel(q, qd, u, params: ManipulatorParams) -> np.ndarray:
    """Joint acceleration from M q'' = u - C q' - D q' - G, no input checks."""
    a, b, d, g1, g2, f1, f2 = _constants(params)
    q1d, q2d = qd[..., 0], qd[..., 1]
    c2, s2 = np.cos(q[..., 1]), np.sin(q[..., 1])
    h = -b * s2
    G2 = g2 * np.cos(q[..., 0] + q[..., 1])
    G1 = g1 * np.cos(q[..., 0]) + G2
    rhs1 = u[..., 0] - h * q2d * (2.0 * q1d + q2d) - f1 * q1d - G1
    rhs2 = u[..., 1] + h * q1d * q1d - f2 * q2d - G2
    m11 = a + 2.0 * b * c2
    m12 = d + b * c2
    det = m11 * d - m12 * m12
    out = np.empty(np.shape(rhs1) + (2,))
    out[..., 0] = (d * rhs1 - m12 * rhs2) / det
    out[..., 1] = (m11 * rhs2 - m12 * rhs1) / det
    return out


def dynamics_accel(state: PlantState, u, params: ManipulatorParams) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qd))):
        raise InvalidInputError("dynamics inputs must be finite")
    return accel(state.q, state.qd, u, params)


def rk4(q, qd, u, dt, params: ManipulatorParams):
    """One classical Runge-Kutta step with zero-order-hold torque."""
    k1q, k1v = qd, accel(q, qd, u, params)
    k2q = qd + 0.5 * dt * k1v
    k2v = accel(q + 0.5 * dt * k1q, k2q, u, params)
    k3q = qd + 0.5 * dt * k2v
    k3v = accel(q + 0.5 * dt * k2q, k3q, u, params)
    k4q = qd + dt * k3v
    k4v = accel(q + dt * k3q, k4q, u, params)
    q_new = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd_new = qd + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return q_new, qd_new


def _accel_scalar(q1, q2, v1, v2, u1, u2, c):
    a, b, d, g1, g2, f1, f2 = c
    c2 = math.cos(q2)
    h = -b * math.sin(q2)
    G2 = g2 * math.cos(q1 + q2)
    G1 = g1 * math.cos(q1) + G2
    rhs1 = u1 - h * v2 * (2.0 * v1 + v2) - f1 * v1 - G1
    rhs2 = u2 + h * v1 * v1 - f2 * v2 - G2
    m11 = a + 2.0 * b * c2
    m12 = d + b * c2
    det = m11 * d - m12 * m12
    return (d * rhs1 - m12 * rhs2) / det, (m11 * rhs2 - m12 * rhs1) / det


def rk4_single(q, qd, u, dt, params: ManipulatorParams):
    """``rk4`` for one state (shape (2,) or (1, 2)) in plain floats; much
    cheaper than the array version when there is nothing to vectorize over."""
    c = _constants(params)
    shape = np.shape(q)
    q1, q2 = (float(x) for x in np.ravel(q))
    v1, v2 = (float(x) for x in np.ravel(qd))
    u1, u2 = (float(x) for x in np.ravel(u))
    h = 0.5 * dt
    a1, b1 = _accel_scalar(q1, q2, v1, v2, u1, u2, c)
    w1, w2 = v1 + h * a1, v2 + h * b1
    a2, b2 = _accel_scalar(q1 + h * v1, q2 + h * v2, w1, w2, u1, u2, c)
    x1, x2 = v1 + h * a2, v2 + h * b2
    a3, b3 = _accel_scalar(q1 + h * w1, q2 + h * w2, x1, x2, u1, u2, c)
    z1, z2 = v1 + dt * a3, v2 + dt * b3
    a4, b4 = _accel_scalar(q1 + dt * x1, q2 + dt * x2, z1, z2, u1, u2, c)
    s = dt / 6.0
    q_new = np.array([q1 + s * (v1 + 2.0 * w1 + 2.0 * x1 + z1), q2 + s * (v2 + 2.0 * w2 + 2.0 * x2 + z2)])
    qd_new = np.array([v1 + s * (a1 + 2.0 * a2 + 2.0 * a3 + a4), v2 + s * (b1 + 2.0 * b2 + 2.0 * b3 + b4)])
    return q_new.reshape(shape), qd_new.reshape(shape)


def integrate_step(state: PlantState, u, dt: float, params: ManipulatorParams, step: int = 0) -> PlantState:
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        q, qd = rk4(state.q, state.qd, np.asarray(u, dtype=float), dt, params)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise DivergenceError(step)
    return PlantState(q, qd)


def forward_kinematics(q, params: ManipulatorParams) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q12 = q[..., 0] + q[..., 1]
    p = np.empty(q.shape)
    p[..., 0] = params.l1 * np.cos(q[..., 0]) + params.l2 * np.cos(q12)
    p[..., 1] = params.l1 * np.sin(q[..., 0]) + params.l2 * np.sin(q12)
    return p


def mechanical_energy(q, qd, params: ManipulatorParams) -> np.ndarray:
    """Kinetic plus potential energy, potential measured from the hanging pose."""
    q, qd = np.asarray(q, dtype=float), np.asarray(qd, dtype=float)
    M = mass_matrix(q, params)
    ke = 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)
    lc1, lc2 = 0.5 * params.l1, 0.5 * params.l2
    z1 = lc1 * np.sin(q[..., 0])
    z2 = params.l1 * np.sin(q[..., 0]) + lc2 * np.sin(q[..., 0] + q[..., 1])
    z1_min, z2_min = -lc1, -(params.l1 + lc2)
    pe = params.g * (params.m1 * (z1 - z1_min) + params.m2 * (z2 - z2_min))
    return ke + pe


# ---------------------------------------------------------------------------
# Sensors


@dataclass(frozen=True)
class CameraParams:
    """Radial (barrel) distortion about ``center``.

    ``workspace_radius`` bounds the base-centred disk the camera is calibrated
    for; the distortion must be one-to-one over it.
    """

    k1: float = -0.08
    k2: float = 0.005
    center: tuple[float, float] = (1.2, -1.0)
    workspace_radius: float = 2.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        if c.shape != (2,):
            raise InvalidInputError("camera center must be a 2-vector")
        # radial map rho -> rho (1 + k1 rho^2 + k2 rho^4) must be increasing
        rho = np.linspace(0.0, self.max_radius, 2001)
        slope = 1.0 + 3.0 * self.k1 * rho**2 + 5.0 * self.k2 * rho**4
        if np.any(slope <= 0):
            raise InvalidInputError("distortion is not invertible over the workspace")

    @property
    def max_radius(self) -> float:
        return float(np.hypot(*self.center) + self.workspace_radius)


def camera_project(p, cam: CameraParams, check: bool = True) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    c = np.asarray(cam.center, dtype=float)
    if check and np.any(np.linalg.norm(p, axis=-1) > cam.workspace_radius + 1e-9):
        raise OutOfWorkspaceError("point lies outside the calibrated camera workspace")
    d = p - c
    r2 = np.sum(d * d, axis=-1, keepdims=True)
    return c + d * (1.0 + cam.k1 * r2 + cam.k2 * r2 * r2)


def noiseless_outputs(q, qd, params: ManipulatorParams, cam: CameraParams):
    return q, qd, camera_project(forward_kinematics(q, params), cam, check=False)


def apply_fault(y_q, y_v, fault: FaultSpec, k: int, dt: float, frozen_value):
    """Overwrite readings in place for steps at or after the fault onset."""
    if fault.kind == "none" or k < fault.start_step(dt):
        return
    if fault.kind == "encoder_freeze":
        y_q[..., fault.joint - 1] = frozen_value
    else:
        y_v += fault.bias


@dataclass
class Sensors:
    """Sensor suite for one simulation run; owns the noise stream and fault latch."""

    params: ManipulatorParams
    cam: CameraParams
    noise: NoiseParams
    fault: FaultSpec = field(default_factory=FaultSpec)
    dt: float = 1e-3

    def __post_init__(self):
        self.rng = np.random.default_rng(self.noise.seed)
        self._frozen = None

    def sense(self, state: PlantState, k: int) -> SensorReading:
        eta = self.rng.standard_normal(6) * self.noise.scales
        return sense(state, self.cam, self.noise, self.fault, k, eta=eta, params=self.params,
                     dt=self.dt, latch=self)


def sense(state: PlantState, cam: CameraParams, noise: NoiseParams, fault: FaultSpec, k: int, *,
          eta, params: ManipulatorParams, dt: float, latch=None) -> SensorReading:
    """Noisy, possibly faulty readings for step ``k``.

    ``eta`` holds the already-scaled noise draw (q1, q2, qd1, qd2, vx, vz).
    ``latch`` is any object with a ``_frozen`` attribute that remembers the
    frozen encoder value across calls.
    """
    q, qd, yv = noiseless_outputs(state.q, state.qd, params, cam)
    y_q = q + eta[..., 0:2]
    y_qd = qd + eta[..., 2:4]
    y_v = yv + eta[..., 4:6]
    frozen = None
    if fault.kind == "encoder_freeze" and k >= fault.start_step(dt):
        if latch is None or latch._frozen is None:
            frozen = np.array(state.q[..., fault.joint - 1], dtype=float)
            if latch is not None:
                latch._frozen = frozen
        else:
            frozen = latch._frozen
    apply_fault(y_q, y_v, fault, k, dt, frozen)
    return SensorReading(y_q, y_qd, y_v, k)
