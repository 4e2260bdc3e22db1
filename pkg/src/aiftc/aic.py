"""Standard active inference controller with generalized motions (baseline).

The goal enters the state prior ``f(mu) = mu_d - mu`` (time constant 1), so the
belief is pulled toward the target. Kept for comparison and for reproducing
the goal-change spike in the sensory prediction errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .uaic import diag_matrix, logdet_excluding_zero, mv


@dataclass
class GeneralizedBelief:
    mu: np.ndarray    # position
    mu1: np.ndarray   # first derivative
    mu2: np.ndarray   # second derivative

    @classmethod
    def at_rest(cls, q0, batch=None) -> "GeneralizedBelief":
        q0 = np.asarray(q0, dtype=float)
        if batch is not None:
            q0 = np.broadcast_to(q0, (batch, 2)).copy()
        return cls(q0.copy(), np.zeros_like(q0), np.zeros_like(q0))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.mu, self.mu1, self.mu2], axis=-1)

    @classmethod
    def from_stacked(cls, z) -> "GeneralizedBelief":
        return cls(z[..., 0:2], z[..., 2:4], z[..., 4:6])


@dataclass
class AICPrecisions:
    yq: np.ndarray
    yqd: np.ndarray
    yv: np.ndarray
    mu: np.ndarray
    mu1: np.ndarray

    @classmethod
    def diagonal(cls, yq=1.0, yqd=1.0, yv=1.0, mu=1.0, mu1=1.0) -> "AICPrecisions":
        return cls(*(diag_matrix(v) for v in (yq, yqd, yv, mu, mu1)))

    def log_det_sum(self):
        return sum(logdet_excluding_zero(getattr(self, n)) for n in ("yq", "yqd", "yv", "mu", "mu1"))


def prediction_errors(b: GeneralizedBelief, y, gpr, mu_d, pred=None):
    g, J = gpr.predict_with_derivative(b.mu) if pred is None else pred
    return dict(
        yq=y.y_q - b.mu,
        yqd=y.y_qd - b.mu1,
        yv=y.y_v - g,
        mu=b.mu1 + b.mu - mu_d,
        mu1=b.mu2 + b.mu1,
    ), J


def free_energy_aic(b: GeneralizedBelief, y, gpr, mu_d, P: AICPrecisions):
    eps, _ = prediction_errors(b, y, gpr, mu_d)
    total = sum(np.einsum("...i,...ij,...j->...", e, getattr(P, k), e) for k, e in eps.items())
    return 0.5 * (total - P.log_det_sum())


def gradient_aic(b: GeneralizedBelief, y, gpr, mu_d, P: AICPrecisions, pred=None) -> GeneralizedBelief:
    """dF/d(mu, mu', mu'') returned as a belief-shaped record."""
    eps, J = prediction_errors(b, y, gpr, mu_d, pred)
    Pe = {k: mv(getattr(P, k), e) for k, e in eps.items()}
    d_mu = -Pe["yq"] - np.einsum("...ki,...k->...i", J, Pe["yv"]) + Pe["mu"]
    d_mu1 = -Pe["yqd"] + Pe["mu"] + Pe["mu1"]
    d_mu2 = Pe["mu1"]
    return GeneralizedBelief(d_mu, d_mu1, d_mu2)


def belief_update_aic(b: GeneralizedBelief, y, gpr, mu_d, P: AICPrecisions, kappa_mu: float,
                      dt: float, pred=None) -> GeneralizedBelief:
    """Euler step of ``d mu~/dt = D mu~ - kappa_mu dF/d mu~``."""
    g = gradient_aic(b, y, gpr, mu_d, P, pred)
    return GeneralizedBelief(
        b.mu + dt * (b.mu1 - kappa_mu * g.mu),
        b.mu1 + dt * (b.mu2 - kappa_mu * g.mu1),
        b.mu2 + dt * (-kappa_mu * g.mu2),
    )


def action_update_aic(u, b: GeneralizedBelief, y, P: AICPrecisions, kappa_u: float, dt: float,
                      torque_limit: float = 50.0):
    """Chain-rule action update with ``dy/du`` approximated by identity blocks on
    the position and velocity channels (camera row zero)."""
    dF_dy = mv(P.yq, y.y_q - b.mu) + mv(P.yqd, y.y_qd - b.mu1)
    return np.clip(u - dt * kappa_u * dF_dy, -torque_limit, torque_limit)


def spe_quadratic(y, b: GeneralizedBelief, gpr, P: AICPrecisions):
    """Per-sensor quadratic prediction errors ``(r_q, r_qd, r_v)``."""
    g = gpr.predict(b.mu) if gpr is not None else None
    e_q, e_qd = y.y_q - b.mu, y.y_qd - b.mu1
    r_q = np.einsum("...i,...ij,...j->...", e_q, P.yq, e_q)
    r_qd = np.einsum("...i,...ij,...j->...", e_qd, P.yqd, e_qd)
    if g is None:
        r_v = np.zeros_like(r_q)
    else:
        e_v = y.y_v - g
        r_v = np.einsum("...i,...ij,...j->...", e_v, P.yv, e_v)
    return r_q, r_qd, r_v
