"""Batched closed-loop simulation.

All runs of a batch share one scenario and differ only in their seed; every
array carries the run index first. Each run owns its own noise stream, drawn
in per-step order (q1, q2, qd1, qd2, vx, vz), so a run's trajectory does not
depend on which other seeds share its batch (beyond last-bit rounding in the
batched linear algebra; identical batches are bit-identical).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import fdi
from ..aic import AICPrecisions, GeneralizedBelief, action_update_aic, belief_update_aic, free_energy_aic
from ..errors import DivergenceError, InvalidInputError
from ..plant import camera_project, forward_kinematics, rk4, rk4_single
from ..uaic import ControlLawParams, UAICBelief, UAICPrecisions, controller_step, quad
from .config import ScenarioConfig

log = logging.getLogger(__name__)

NOISE_CHUNK = 1000

# per-step series kept in a full record, with their trailing shapes
FULL_FIELDS = {
    "q": (2,), "qd": (2,), "mu_q": (2,), "mu_qd": (2,), "mu_u": (2,), "u": (2,), "y": (6,),
    "target": (2,), "stat": (), "normalized": (), "normalized_p": (), "normalized_v": (), "alarm": (),
    "verdict": (), "free_energy": (), "spe": (3,),
}


@dataclass
class CalibrationSet:
    """Healthy statistics for the main residual and both isolation residuals."""

    main: fdi.ResidualStats
    proprio: fdi.ResidualStats
    visual: fdi.ResidualStats
    key: str = ""

    def save(self, path):
        arrays = {"key": np.array(self.key)}
        for name in ("main", "proprio", "visual"):
            arrays.update(getattr(self, name).to_arrays(name + "_"))
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        with np.load(path) as z:
            return cls(*(fdi.ResidualStats.from_arrays(z, n + "_") for n in ("main", "proprio", "visual")),
                       str(z["key"]))


@dataclass
class Accumulators:
    main: fdi.ResidualAccumulator
    proprio: fdi.ResidualAccumulator
    visual: fdi.ResidualAccumulator

    @classmethod
    def empty(cls, steps: int) -> "Accumulators":
        return cls(fdi.ResidualAccumulator(steps, 6), fdi.ResidualAccumulator(steps, 4),
                   fdi.ResidualAccumulator(steps, 2))

    def commit(self, m: int):
        for a in (self.main, self.proprio, self.visual):
            a.commit(m)


@dataclass
class BatchResult:
    seeds: list
    cfg: ScenarioConfig
    q: np.ndarray                 # (N, T, 2) true joint positions
    mu_q: np.ndarray              # (N, T, 2) position belief
    targets: np.ndarray           # (T, 2)
    alarm_onsets: list            # per run: steps where the confirmed alarm switched on
    raw_alarm_count: np.ndarray   # (T,) runs with a per-step exceedance at each step
    max_normalized: np.ndarray    # (N,) largest per-step normalized statistic
    detect_step: np.ndarray       # (N,) first confirmed alarm, -1 if none
    verdict: np.ndarray           # (N,) 0 none, 1 unknown, 2 encoder_or_velocity, 3 camera
    isolation_step: np.ndarray    # (N,)
    threshold: float
    full: dict | None = None      # FULL_FIELDS arrays (N, T, ...) when recorded
    spe_q: np.ndarray | None = None  # (N, T) position SPE quadratic
    estimator_failures: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    stat: np.ndarray | None = None   # (N, T) float32 main statistic when detecting

    def exceedances(self, alpha: float, n: int = 6) -> np.ndarray:
        """(T,) number of runs whose per-step statistic exceeds ``n / alpha``."""
        if self.stat is None:
            raise ValueError("batch was run without detection")
        return np.count_nonzero(self.stat > n / alpha, axis=0)

    def __len__(self):
        return len(self.seeds)


def _uaic_setup(cfg: ScenarioConfig, n: int):
    c = cfg.uaic
    P = UAICPrecisions.diagonal(c.p_yq, c.p_yqd, c.p_yv, c.p_x, c.p_u).validate()
    law = ControlLawParams(c.kp, c.ki, c.kd, cfg.waypoints[0], c.integral_limit)
    return P, law


def simulate_batch(cfg: ScenarioConfig, seeds, gpr, calibration: CalibrationSet | None = None, *,
                   record: str = "metrics", accumulate: Accumulators | None = None) -> BatchResult:
    """Run ``len(seeds)`` closed-loop simulations of ``cfg`` side by side.

    ``record="full"`` keeps every per-step series; ``"metrics"`` keeps only
    positions, beliefs and alarm summaries. With ``accumulate`` the smoothed
    residuals are streamed into calibration accumulators.
    """
    if record not in ("full", "metrics"):
        raise InvalidInputError("record must be 'full' or 'metrics'")
    seeds = [int(s) for s in seeds]
    n, T, dt = len(seeds), cfg.steps, cfg.dt
    params, cam = cfg.plant.build(), cfg.camera.build()
    scales = cfg.noise.build(0).scales
    fault = cfg.fault.build()
    kf = fault.start_step(dt) if fault.kind != "none" else -1
    targets = cfg.target_schedule()
    rngs = [np.random.default_rng(s) for s in seeds]
    step_plant = rk4_single if n == 1 else rk4

    q = np.broadcast_to(np.asarray(cfg.q0, dtype=float), (n, 2)).copy()
    qd = np.zeros((n, 2))
    frozen = None

    uaic = cfg.controller == "uaic"
    fc = cfg.fdi
    detecting = uaic and cfg.detection and calibration is not None
    estimating = uaic and (detecting or accumulate is not None)
    if uaic:
        P_nom, law = _uaic_setup(cfg, n)
        P = P_nom.batched(n)
        b = UAICBelief.at_rest(cfg.q0, n)
        bp = fdi.EstimatorBelief(b.mu_q.copy(), b.mu_qd.copy())
        bv = fdi.EstimatorBelief(b.mu_q.copy(), b.mu_qd.copy())
        gains = fdi.IsolationGains(fc.kappa_p, fc.kappa_v)
        log_det = P.log_det_sum()
    else:
        a = cfg.aic
        Pa = AICPrecisions.diagonal(a.p_yq, a.p_yqd, a.p_yv, a.p_mu, a.p_mu1)
        b = GeneralizedBelief.at_rest(cfg.q0, n)
        u = np.zeros((n, 2))

    det = fdi.DetectionConfig(fc.alpha, 6, fc.use_squared, fc.confirm_steps, fc.isolation_window)
    det_p, det_v = det.for_subsystem(4), det.for_subsystem(2)
    ma = fdi.MovingAverage(fc.smoothing, (n, 12))
    confirm = fdi.Confirmation(fc.confirm_steps, (n, 3))
    thresholds = np.array([det.threshold, det_p.threshold, det_v.threshold])
    monitor = _Monitor(calibration, T, fc.use_squared) if detecting else None
    isolator = fdi.Isolator(n, fc.isolation_window)
    failures = np.zeros(n, dtype=int)

    Q = np.empty((n, T, 2))
    MU = np.empty((n, T, 2))
    full = {k: np.full((n, T) + s, np.nan) for k, s in FULL_FIELDS.items()} if record == "full" else None
    spe_q = np.empty((n, T))
    raw_count = np.zeros(T, dtype=int)
    stat_trace = np.full((n, T), np.nan, dtype=np.float32) if detecting else None
    max_norm = np.full(n, -np.inf) if detecting else np.full(n, np.nan)
    onsets = [[] for _ in range(n)]
    prev_alarm = np.zeros(n, dtype=bool)
    stat = norm = np.full(n, np.nan)
    alarm = np.zeros(n, dtype=bool)

    for k in range(T):
        if k % NOISE_CHUNK == 0:
            m = min(NOISE_CHUNK, T - k)
            eta = np.stack([r.standard_normal((m, 6)) for r in rngs], axis=1) * scales
        e = eta[k % NOISE_CHUNK]

        y_q = q + e[:, 0:2]
        y_qd = qd + e[:, 2:4]
        y_v = camera_project(forward_kinematics(q, params), cam, check=False) + e[:, 4:6]
        if kf >= 0 and k >= kf:
            if fault.kind == "encoder_freeze":
                if frozen is None:
                    frozen = q[:, fault.joint - 1].copy()
                y_q[:, fault.joint - 1] = frozen
            else:
                y_v += fault.bias
        y = _Reading(y_q, y_qd, y_v, k)
        target = targets[k]

        if uaic:
            law.target = target
            mus = np.concatenate([b.mu_q, bv.mu_q]) if estimating else b.mu_q
            g_all, J_all = gpr.predict_with_derivative(mus)
            b_new, u, info = controller_step(b, y, gpr, law, P, cfg.uaic.kappa_mu, cfg.uaic.kappa_u, dt,
                                             torque_limit=cfg.uaic.torque_limit,
                                             exact_coupling=cfg.uaic.exact_coupling, step=k,
                                             pred=(g_all[:n], J_all[:n]), info=True, log_det=log_det)
            r = info.residual
            spe_q[:, k] = quad(P.yq, r[:, 0:2])
            if estimating:
                bp, r_p = fdi._proprio_step(bp, y, P_nom, gains.kappa_p, dt)
                bv, r_v = fdi._visual_step(bv, y, gpr, P_nom, gains.kappa_v, dt, (g_all[n:], J_all[n:]))
                bad = ~(np.all(np.isfinite(bp.mu_x), axis=1) & np.all(np.isfinite(bv.mu_x), axis=1))
                if bad.any():
                    log.warning("isolation estimator diverged at step %d; reset from controller belief", k)
                    failures[bad] += 1
                    for est in (bp, bv):
                        est.mu_q[bad], est.mu_qd[bad] = b_new.mu_q[bad], b_new.mu_qd[bad]
                smooth = ma(np.concatenate([r, r_p, r_v], axis=1))
                if accumulate is not None:
                    accumulate.main.add_step(k, smooth[:, 0:6])
                    accumulate.proprio.add_step(k, smooth[:, 6:10])
                    accumulate.visual.add_step(k, smooth[:, 10:12])
                if detecting:
                    stats3 = monitor.statistics(smooth, k)
                    norms = stats3 / thresholds
                    over = confirm(norms > 1.0)
                    stat, norm, alarm = stats3[:, 0], norms[:, 0], over[:, 0]
                    raw = norm > 1.0
                    raw_count[k] = int(raw.sum())
                    stat_trace[:, k] = stat
                    np.maximum(max_norm, norm, out=max_norm)
                    newly = isolator.update(k, alarm, over[:, 1], over[:, 2])
                    if cfg.recovery and newly.any():
                        fdi.recover_runs(P, isolator.verdict, newly, fc.zero_velocity_precision)
                        log_det = P.log_det_sum()
                    if (alarm & ~prev_alarm).any():
                        for i in np.flatnonzero(alarm & ~prev_alarm):
                            onsets[i].append(k)
                    prev_alarm = alarm
            fe = info.free_energy
            mu_q, mu_qd, mu_u = b.mu_q, b.mu_qd, b.mu_u
            b = b_new
        else:
            pred = gpr.predict_with_derivative(b.mu)
            e_q = y_q - b.mu
            spe_q[:, k] = quad(Pa.yq, e_q)
            if full is not None:
                fe = free_energy_aic(b, y, gpr, target, Pa)
                e_qd, e_v = y_qd - b.mu1, y_v - pred[0]
                full["spe"][:, k] = np.stack([spe_q[:, k], quad(Pa.yqd, e_qd), quad(Pa.yv, e_v)], axis=1)
            b_new = belief_update_aic(b, y, gpr, target, Pa, cfg.aic.kappa_mu, dt, pred)
            u = action_update_aic(u, b, y, Pa, cfg.aic.kappa_u, dt, cfg.aic.torque_limit)
            mu_q, mu_qd, mu_u = b.mu, b.mu1, u
            b = b_new
            if not np.all(np.isfinite(b.stacked())):
                raise DivergenceError(k, "controller belief became non-finite")

        Q[:, k] = q
        MU[:, k] = mu_q
        if full is not None:
            full["q"][:, k], full["qd"][:, k] = q, qd
            full["mu_q"][:, k], full["mu_qd"][:, k], full["mu_u"][:, k] = mu_q, mu_qd, mu_u
            full["u"][:, k], full["target"][:, k] = u, target
            yk = full["y"][:, k]
            yk[:, 0:2], yk[:, 2:4], yk[:, 4:6] = y_q, y_qd, y_v
            full["alarm"][:, k], full["verdict"][:, k], full["free_energy"][:, k] = alarm, isolator.verdict, fe
            if uaic:
                sp = full["spe"][:, k]
                sp[:, 0], sp[:, 1], sp[:, 2] = spe_q[:, k], quad(P.yqd, r[:, 2:4]), quad(P.yv, r[:, 4:6])
            if detecting:
                full["stat"][:, k], full["normalized"][:, k] = stat, norm
                full["normalized_p"][:, k], full["normalized_v"][:, k] = norms[:, 1], norms[:, 2]

        q, qd = step_plant(q, qd, u, dt, params)
        if not np.isfinite(q.sum() + qd.sum()):
            raise DivergenceError(k)

    if accumulate is not None:
        accumulate.commit(n)
    return BatchResult(seeds, cfg, Q, MU, targets, onsets, raw_count, max_norm, isolator.detect_step,
                       isolator.verdict, isolator.isolation_step, det.threshold, full, spe_q, failures,
                       stat_trace)


class _Monitor:
    """Fused Mahalanobis statistics of the main, proprioceptive and visual
    residuals, with one block-diagonal whitener per step (stationary blocks
    wherever the calibration marks a step as settled)."""

    SLICES = (slice(0, 6), slice(6, 10), slice(10, 12))
    STARTS = [0, 6, 10]

    def __init__(self, cal: CalibrationSet, steps: int, squared: bool = True):
        self.squared = squared
        self.mean = np.zeros((steps, 12))
        self.white = np.zeros((steps, 12, 12))
        for sl, stats in zip(self.SLICES, (cal.main, cal.proprio, cal.visual)):
            if stats.horizon < steps:
                log.warning("calibration covers %d of %d steps; stationary statistics beyond",
                            stats.horizon, steps)
            stats.whitener_at(0)  # factorize once
            per_step = np.arange(steps) < stats.horizon
            use = np.zeros(steps, dtype=bool)
            use[per_step] = ~stats.settled[:min(steps, stats.horizon)]
            self.mean[:, sl] = stats.stationary_mean
            self.white[:, sl, sl] = stats._whiten_stat
            idx = np.flatnonzero(use)
            self.mean[idx, sl] = stats.mean[idx]
            self.white[idx, sl, sl] = stats._whiten[idx]

    def statistics(self, smooth, k):
        z = (smooth - self.mean[k]) @ self.white[k].T
        z2 = z * z
        d2 = np.add.reduceat(z2, self.STARTS, axis=1)
        return d2 if self.squared else np.sqrt(d2)


@dataclass
class _Reading:
    y_q: np.ndarray
    y_qd: np.ndarray
    y_v: np.ndarray
    k: int


def calibrate(cfg: ScenarioConfig, gpr, runs: int | None = None, batch: int = 50,
              seed_offset: int = 1_000_000, key: str = "") -> CalibrationSet:
    """Healthy Monte Carlo calibration of the three residual statistics.

    Calibration seeds start at ``seed_offset`` so they never coincide with
    evaluation seeds.
    """
    runs = cfg.fdi.calibration_runs if runs is None else runs
    healthy = cfg.replace(**{"fault.kind": "none", "controller": "uaic", "detection": False})
    acc = Accumulators.empty(cfg.steps)
    seeds = [seed_offset + i for i in range(runs)]
    for start in range(0, runs, batch):
        simulate_batch(healthy, seeds[start:start + batch], gpr, None, accumulate=acc)
        log.info("calibration: %d/%d runs", min(start + batch, runs), runs)
    fc = cfg.fdi
    kw = dict(min_runs=fc.min_runs, dt=cfg.dt, stationary_window=fc.stationary_window,
              plateau_window=fc.plateau_window, key=key)
    return CalibrationSet(fdi.calibrate_stats(acc.main, **kw), fdi.calibrate_stats(acc.proprio, **kw),
                          fdi.calibrate_stats(acc.visual, **kw), key)
