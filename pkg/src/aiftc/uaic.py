"""Unbiased active inference controller.

State belief ``mu_x = [mu_q, mu_qd]`` and action belief ``mu_u`` descend the
free-energy

    F = 1/2 (e_yq' P_yq e_yq + e_yqd' P_yqd e_yqd + e_yv' P_yv e_yv
             + e_x' P_x e_x + e_u' P_u e_u - sum log|P_i|)

with ``e_x = mu_x - x_hat`` (constant-velocity prediction) and
``e_u = mu_u - f*(mu_x, mu_d)`` where ``f*`` is a PID law on the beliefs.
The target only enters through ``e_u``, so the state estimate is not pulled
toward the goal.

Every function broadcasts over leading batch dimensions: beliefs may hold
``(N, 2)`` arrays and precisions ``(N, 2, 2)`` stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from types import SimpleNamespace

import numpy as np

from .errors import ControllerDivergenceError, InvalidInputError


def mv(P, e):
    return np.matmul(P, e[..., None])[..., 0]


def quad(P, e):
    return np.einsum("...i,...ij,...j->...", e, P, e)


def logdet_excluding_zero(P) -> np.ndarray:
    """log|P|, with all-zero (switched off) matrices contributing 0."""
    P = np.asarray(P, dtype=float)
    off = np.all(P == 0.0, axis=(-2, -1))
    sign, ld = np.linalg.slogdet(np.where(off[..., None, None], np.eye(P.shape[-1]), P))
    return np.where(off, 0.0, np.where(sign > 0, ld, -np.inf))


def diag_matrix(values, size=2) -> np.ndarray:
    v = np.broadcast_to(np.asarray(values, dtype=float), (size,))
    return np.diag(v)


@dataclass
class UAICBelief:
    mu_q: np.ndarray
    mu_qd: np.ndarray
    mu_u: np.ndarray
    integral: np.ndarray

    @classmethod
    def at_rest(cls, q0, batch=None) -> "UAICBelief":
        q0 = np.asarray(q0, dtype=float)
        if batch is not None:
            q0 = np.broadcast_to(q0, (batch, 2)).copy()
        z = np.zeros_like(q0)
        return cls(q0.copy(), z.copy(), z.copy(), z.copy())

    @property
    def mu_x(self) -> np.ndarray:
        return np.concatenate([self.mu_q, self.mu_qd], axis=-1)

    def is_finite(self) -> bool:
        # one reduction per array: a sum is non-finite iff some entry is (or it overflows)
        return all(np.isfinite(np.sum(a)) for a in (self.mu_q, self.mu_qd, self.mu_u, self.integral))


@dataclass
class UAICPrecisions:
    yq: np.ndarray
    yqd: np.ndarray
    yv: np.ndarray
    x: np.ndarray
    u: np.ndarray

    @classmethod
    def diagonal(cls, yq, yqd, yv, x, u) -> "UAICPrecisions":
        """Build from scalar or per-axis diagonal entries; ``x`` may have 2 or 4 entries."""
        xv = np.asarray(x, dtype=float)
        xd = np.concatenate([np.broadcast_to(xv, (2,)), np.broadcast_to(xv, (2,))]) if xv.size < 4 else xv
        return cls(diag_matrix(yq), diag_matrix(yqd), diag_matrix(yv), np.diag(xd), diag_matrix(u))

    def validate(self):
        for name in ("yq", "yqd", "yv", "x", "u"):
            P = getattr(self, name)
            if not np.allclose(P, np.swapaxes(P, -1, -2)):
                raise InvalidInputError(f"precision {name} must be symmetric")
            if np.any(np.linalg.eigvalsh(P) < -1e-12):
                raise InvalidInputError(f"precision {name} must be positive semidefinite")
        return self

    def batched(self, n: int) -> "UAICPrecisions":
        """Independent copies per run, so recovery can edit one run at a time."""
        def rep(P):
            return np.broadcast_to(P, (n,) + P.shape[-2:]).copy()
        return UAICPrecisions(rep(self.yq), rep(self.yqd), rep(self.yv), rep(self.x), rep(self.u))

    def log_det_sum(self) -> np.ndarray:
        return sum(logdet_excluding_zero(getattr(self, n)) for n in ("yq", "yqd", "yv", "x", "u"))


@dataclass
class ControlLawParams:
    """PID gains (diagonal 2x2), current target and anti-windup bound."""

    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray
    target: np.ndarray
    integral_limit: float = 2.0

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            K = np.asarray(getattr(self, name), dtype=float)
            if K.ndim == 1:
                K = np.diag(K)
            if K.shape != (2, 2) or np.any(K != np.diag(np.diag(K))) or np.any(np.diag(K) < 0):
                raise InvalidInputError(f"{name} must be a nonnegative diagonal 2x2 gain")
            setattr(self, name, K)
        self.target = np.asarray(self.target, dtype=float)
        if self.integral_limit <= 0:
            raise InvalidInputError("integral_limit must be positive")

    def with_target(self, target) -> "ControlLawParams":
        return replace(self, target=np.asarray(target, dtype=float))


def predict_prior(b: UAICBelief, dt: float) -> np.ndarray:
    """Constant-velocity prediction ``[I, I dt; 0, I] mu_x``."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    return np.concatenate([b.mu_q + dt * b.mu_qd, b.mu_qd], axis=-1)


def f_star(b: UAICBelief, law: ControlLawParams, dt: float):
    """PID torque on the beliefs and the updated (clamped) integral.

    Returns ``(torque, integral)``; the caller stores ``integral`` back into
    the belief record once the step is committed.
    """
    err = law.target - b.mu_q
    integral = np.clip(b.integral + err * dt, -law.integral_limit, law.integral_limit)
    u = mv(law.kp, err) + mv(law.ki, integral) - mv(law.kd, b.mu_qd)
    return u, integral


def f_star_jacobian(b: UAICBelief, law: ControlLawParams, dt: float):
    """Derivatives of ``f*`` with respect to ``mu_q`` and ``mu_qd``."""
    raw = b.integral + (law.target - b.mu_q) * dt
    active = (np.abs(raw) < law.integral_limit).astype(float)   # zero slope once clamped
    ki_eff = law.ki * (active[..., None, :] * dt)
    d_q = -(law.kp + ki_eff)
    d_qd = -np.broadcast_to(law.kd, d_q.shape)
    return d_q, d_qd


def _evaluate(b, y, gpr, x_hat, law, P, dt, exact_coupling=True, pred=None):
    if pred is None:
        pred = gpr.predict_with_derivative(b.mu_q)
    g, J = pred
    e_q = y.y_q - b.mu_q
    e_qd = y.y_qd - b.mu_qd
    e_v = y.y_v - g
    e_x = b.mu_x - x_hat
    fu, integral = f_star(b, law, dt)
    e_u = b.mu_u - fu

    Pe_q, Pe_qd, Pe_v = mv(P.yq, e_q), mv(P.yqd, e_qd), mv(P.yv, e_v)
    Pe_x, Pe_u = mv(P.x, e_x), mv(P.u, e_u)

    g_q = -Pe_q - np.einsum("...ki,...k->...i", J, Pe_v) + Pe_x[..., :2]
    g_qd = -Pe_qd + Pe_x[..., 2:]
    if exact_coupling:
        d_q, d_qd = f_star_jacobian(b, law, dt)
        g_q = g_q - np.einsum("...ki,...k->...i", d_q, Pe_u)
        g_qd = g_qd - np.einsum("...ki,...k->...i", d_qd, Pe_u)

    quad_sum = (np.sum(e_q * Pe_q, -1) + np.sum(e_qd * Pe_qd, -1) + np.sum(e_v * Pe_v, -1)
                + np.sum(e_x * Pe_x, -1) + np.sum(e_u * Pe_u, -1))
    return SimpleNamespace(e_q=e_q, e_qd=e_qd, e_v=e_v, e_x=e_x, e_u=e_u, f_star=fu,
                           integral=integral, quad=quad_sum,
                           grad_x=np.concatenate([g_q, g_qd], axis=-1), grad_u=Pe_u, g_v=g)


def free_energy_uaic(b: UAICBelief, y, gpr, x_hat, law: ControlLawParams, P: UAICPrecisions,
                     dt: float) -> np.ndarray:
    """Laplace free-energy without its additive constant. Log-determinants of
    switched-off (all-zero) precisions are left out."""
    ev = _evaluate(b, y, gpr, x_hat, law, P, dt)
    return 0.5 * (ev.quad - P.log_det_sum())


def gradients_uaic(b: UAICBelief, y, gpr, x_hat, law: ControlLawParams, P: UAICPrecisions,
                   dt: float, exact_coupling: bool = True):
    """``(dF/dmu_x, dF/dmu_u)``. With ``exact_coupling=False`` the state
    gradient ignores the dependence of ``f*`` on the belief."""
    ev = _evaluate(b, y, gpr, x_hat, law, P, dt, exact_coupling)
    return ev.grad_x, ev.grad_u


@dataclass
class StepInfo:
    """Diagnostics of one controller cycle, evaluated at the pre-update belief."""

    free_energy: np.ndarray
    residual: np.ndarray      # (..., 6) = [y_q - mu_q, y_qd - mu_qd, y_v - g_v(mu_q)]
    f_star: np.ndarray


def controller_step(b: UAICBelief, y, gpr, law: ControlLawParams, P: UAICPrecisions,
                    kappa_mu: float, kappa_u: float, dt: float, *, torque_limit: float = np.inf,
                    exact_coupling: bool = True, step: int = 0, pred=None, info: bool = False,
                    log_det=None):
    """One estimation and control cycle (explicit Euler on the gradient flow).

    Returns ``(new_belief, torque)`` or, with ``info=True``,
    ``(new_belief, torque, StepInfo)``. ``log_det`` may carry a cached
    ``P.log_det_sum()`` for the free-energy diagnostic.
    """
    if dt <= 0 or kappa_mu <= 0 or kappa_u <= 0:
        raise InvalidInputError("dt and step sizes must be positive")
    x_hat = predict_prior(b, dt)
    ev = _evaluate(b, y, gpr, x_hat, law, P, dt, exact_coupling, pred)
    mu_x = b.mu_x - kappa_mu * dt * ev.grad_x
    new = UAICBelief(mu_x[..., :2], mu_x[..., 2:], b.mu_u - kappa_u * dt * ev.grad_u, ev.integral)
    if not new.is_finite():
        raise ControllerDivergenceError(step)
    u = np.clip(new.mu_u, -torque_limit, torque_limit)
    if not info:
        return new, u
    resid = np.concatenate([ev.e_q, ev.e_qd, ev.e_v], axis=-1)
    fe = 0.5 * (ev.quad - (P.log_det_sum() if log_det is None else log_det))
    return new, u, StepInfo(fe, resid, ev.f_star)
