"""Fault detection, isolation and recovery from sensory prediction errors.

Residual channel order is fixed: ``q1, q2, qd1, qd2, vx, vz`` for the main
controller, ``q1, q2, qd1, qd2`` for the proprioceptive estimator and
``vx, vz`` for the visual one.

Detection compares the squared Mahalanobis distance of a residual against
``n / alpha`` (multivariate Chebyshev), using healthy per-step statistics.
Residuals may first be smoothed by a trailing moving average; the statistics
are calibrated on the same smoothed signal, so the bound is unaffected.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientCalibrationError, InvalidInputError, IsolationEstimatorError
from .uaic import UAICPrecisions, mv, predict_prior

log = logging.getLogger(__name__)

CHANNELS = ("q1", "q2", "qd1", "qd2", "vx", "vz")
PROPRIO_CHANNELS = CHANNELS[:4]
VISUAL_CHANNELS = CHANNELS[4:]

ENCODER = "encoder_or_velocity"
CAMERA = "camera"
UNKNOWN = "unknown"
LOCATIONS = (UNKNOWN, ENCODER, CAMERA)  # index = verdict code - 1; 0 = no verdict

STATS_FORMAT = "aiftc-residual-stats"
STATS_VERSION = 1


@dataclass
class Residual:
    r: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        if not np.all(np.isfinite(self.r)):
            raise InvalidInputError("residual must be finite")


def compute_residual(y, b, gpr) -> Residual:
    """Sensory prediction errors of the (pre-update) controller belief."""
    mu_qd = b.mu_qd if hasattr(b, "mu_qd") else b.mu1
    mu_q = b.mu_q if hasattr(b, "mu_q") else b.mu
    r = np.concatenate([y.y_q - mu_q, y.y_qd - mu_qd, y.y_v - gpr.predict(mu_q)], axis=-1)
    return Residual(r, getattr(y, "k", 0))


# ---------------------------------------------------------------------------
# Calibration


class ResidualAccumulator:
    """Streaming per-step first and second moments over independent runs.

    Sums are taken around a shift (the first batch's per-step mean) to keep
    the variance numerically clean when means dominate.
    """

    def __init__(self, steps: int, n: int):
        self.steps, self.n = steps, n
        self.count = 0
        self.shift = None
        self.s1 = np.zeros((steps, n))
        self.s2 = np.zeros((steps, n, n))

    def add(self, traces):
        traces = np.asarray(traces, dtype=float)
        if traces.ndim == 2:
            traces = traces[None]
        if traces.shape[1:] != (self.steps, self.n):
            raise InvalidInputError(f"trace shape {traces.shape[1:]} != {(self.steps, self.n)}")
        if self.shift is None:
            self.shift = traces.mean(axis=0)
        d = traces - self.shift
        self.s1 += d.sum(axis=0)
        self.s2 += np.einsum("mti,mtj->tij", d, d)
        self.count += len(traces)

    def add_step(self, k: int, values):
        """Accumulate step ``k`` of a batch of runs (``values`` is (M, n)).

        Call :meth:`commit` with the batch size once every step is in.
        """
        if self.shift is None:
            self.shift = np.zeros((self.steps, self.n))
            self._fresh = True
        if getattr(self, "_fresh", False):
            self.shift[k] = values.mean(axis=0)
        d = values - self.shift[k]
        self.s1[k] += d.sum(axis=0)
        self.s2[k] += d.T @ d

    def commit(self, m: int):
        self._fresh = False
        self.count += m

    def moments(self):
        m = self.count
        mean_d = self.s1 / m
        cov = (self.s2 - m * np.einsum("ti,tj->tij", mean_d, mean_d)) / (m - 1)
        return self.shift + mean_d, cov


@dataclass
class ResidualStats:
    mean: np.ndarray            # (T, n)
    cov: np.ndarray             # (T, n, n)
    stationary_mean: np.ndarray
    stationary_cov: np.ndarray
    settled: np.ndarray         # (T,) bool: step uses the stationary moments
    n_runs: int
    dt: float = 1e-3
    key: str = ""
    _whiten: np.ndarray = field(default=None, repr=False)
    _whiten_stat: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.mean.shape[1]

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    def _prepare(self):
        if self._whiten is None:
            self._whiten = np.linalg.inv(_safe_cholesky(self.cov, "per-step"))
            self._whiten_stat = np.linalg.inv(_safe_cholesky(self.stationary_cov, "stationary"))

    def moments_at(self, k: int):
        if k >= self.horizon or self.settled[k]:
            return self.stationary_mean, self.stationary_cov
        return self.mean[k], self.cov[k]

    def whitener_at(self, k: int):
        """(mean, L^-1) for step ``k`` so that ``d_M = |L^-1 (r - mean)|``."""
        self._prepare()
        if k >= self.horizon or self.settled[k]:
            return self.stationary_mean, self._whiten_stat
        return self.mean[k], self._whiten[k]

    def save(self, path):
        np.savez(path, format=np.array(STATS_FORMAT), version=np.array(STATS_VERSION),
                 mean=self.mean, cov=self.cov, stationary_mean=self.stationary_mean,
                 stationary_cov=self.stationary_cov, settled=self.settled,
                 n_runs=np.array(self.n_runs), dt=np.array(self.dt), key=np.array(self.key))

    @classmethod
    def load(cls, path, prefix: str = "") -> "ResidualStats":
        with np.load(path) as z:
            return cls.from_arrays(z, prefix)

    @classmethod
    def from_arrays(cls, z, prefix: str = ""):
        p = prefix
        if str(z[p + "format"]) != STATS_FORMAT or int(z[p + "version"]) != STATS_VERSION:
            raise InvalidInputError("not a residual-statistics artifact of a supported version")
        return cls(z[p + "mean"], z[p + "cov"], z[p + "stationary_mean"], z[p + "stationary_cov"],
                   z[p + "settled"].astype(bool), int(z[p + "n_runs"]), float(z[p + "dt"]),
                   str(z[p + "key"]))

    def to_arrays(self, prefix: str = "") -> dict:
        p = prefix
        return {p + "format": np.array(STATS_FORMAT), p + "version": np.array(STATS_VERSION),
                p + "mean": self.mean, p + "cov": self.cov,
                p + "stationary_mean": self.stationary_mean, p + "stationary_cov": self.stationary_cov,
                p + "settled": self.settled, p + "n_runs": np.array(self.n_runs),
                p + "dt": np.array(self.dt), p + "key": np.array(self.key)}


def _safe_cholesky(C, what):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        diag = np.diagonal(C, axis1=-2, axis2=-1)
        bad = np.argwhere(diag <= 0)
        raise np.linalg.LinAlgError(
            f"{what} residual covariance is singular; non-positive variances at {bad.tolist()[:5]}"
        ) from None


def settled_mask(mean, cov, st_mean, st_cov, window: int, mean_tol: float = 1.0,
                 cov_ratio: float = 2.0) -> np.ndarray:
    """Steps whose moments sit on the stationary plateau throughout a centred window.

    A step qualifies when the per-step mean is within ``mean_tol`` stationary
    standard deviations (Mahalanobis) of the stationary mean and the
    per-step covariance trace is within a factor ``cov_ratio`` of the
    stationary one, for every step of the surrounding window.
    """
    Li = np.linalg.inv(np.linalg.cholesky(st_cov))
    dm = np.linalg.norm((mean - st_mean) @ Li.T, axis=-1)
    ratio = np.trace(cov, axis1=-2, axis2=-1) / np.trace(st_cov)
    ok = (dm <= mean_tol) & (ratio <= cov_ratio) & (ratio >= 1.0 / cov_ratio)
    if window <= 1:
        return ok
    bad = np.convolve((~ok).astype(float), np.ones(window), mode="same")
    return bad == 0


def calibrate_stats(runs, *, min_runs: int = 100, reg: float = 1e-12, dt: float = 1e-3,
                    stationary_window: int = 1000, plateau_window: int = 200,
                    key: str = "") -> ResidualStats:
    """Per-step healthy residual moments plus a stationary fallback.

    ``runs`` is an array of traces ``(M, T, n)`` or a filled
    :class:`ResidualAccumulator`. The stationary moments pool the last
    ``stationary_window`` steps (law of total variance).
    """
    acc = runs
    if not isinstance(runs, ResidualAccumulator):
        runs = np.asarray(runs, dtype=float)
        acc = ResidualAccumulator(runs.shape[1], runs.shape[2])
        if len(runs) >= 2:
            acc.add(runs)
        else:
            acc.count = len(runs)
    if acc.count < max(min_runs, 2):
        raise InsufficientCalibrationError(f"need at least {max(min_runs, 2)} healthy runs, got {acc.count}")
    mean, cov = acc.moments()
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eye = np.eye(acc.n)
    cov = cov + reg * eye
    w = min(stationary_window, acc.steps)
    tail_mean = mean[-w:]
    st_mean = tail_mean.mean(axis=0)
    dev = tail_mean - st_mean
    st_cov = cov[-w:].mean(axis=0) + dev.T @ dev / w
    st_cov = 0.5 * (st_cov + st_cov.T) + reg * eye
    settled = settled_mask(mean, cov, st_mean, st_cov, plateau_window)
    return ResidualStats(mean, cov, st_mean, st_cov, settled, acc.count, dt, key)


# ---------------------------------------------------------------------------
# Detection


@dataclass(frozen=True)
class DetectionConfig:
    alpha: float = 0.01
    n: int = 6
    use_squared: bool = True
    confirm_steps: int = 5
    isolation_window: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in (0, 1]")
        if self.n <= 0:
            raise InvalidInputError("residual dimension must be positive")

    @property
    def threshold(self) -> float:
        return self.n / self.alpha

    def for_subsystem(self, n: int) -> "DetectionConfig":
        return replace(self, n=n)


def mahalanobis(r, stats: ResidualStats, k: int) -> np.ndarray:
    """Mahalanobis distance of residual(s) ``r`` (..., n) from step-``k`` moments."""
    r = r.r if isinstance(r, Residual) else np.asarray(r, dtype=float)
    mean, Li = stats.whitener_at(k)
    z = (r - mean) @ Li.T
    return np.sqrt(np.sum(z * z, axis=-1))


def detect(d, cfg: DetectionConfig):
    """``(alarm, normalized)``: alarm iff the statistic exceeds ``n / alpha``.

    The statistic is ``d**2`` by default and ``d`` itself with
    ``use_squared=False``. ``normalized`` is statistic / threshold.
    """
    d = np.asarray(d, dtype=float)
    stat = d * d if cfg.use_squared else d
    norm = stat / cfg.threshold
    return norm > 1.0, norm


class MovingAverage:
    """Trailing boxcar average over the last ``width`` samples (batched)."""

    def __init__(self, width: int, shape):
        if width < 1:
            raise InvalidInputError("averaging width must be >= 1")
        self.width = width
        self.buf = np.zeros((width,) + tuple(shape))
        self.total = np.zeros(shape)
        self.count = 0

    def __call__(self, x):
        if self.width == 1:
            return np.array(x, dtype=float)
        i = self.count % self.width
        self.total += x - self.buf[i]
        self.buf[i] = x
        self.count += 1
        # refresh the running sum every lap to stop round-off creep
        if i == self.width - 1:
            self.total = self.buf.sum(axis=0)
        return self.total / min(self.count, self.width)


class Confirmation:
    """Consecutive-exceedance counter: fires after ``steps`` in a row."""

    def __init__(self, steps: int, shape=()):
        self.steps = steps
        self.run = np.zeros(shape, dtype=int)

    def __call__(self, over):
        self.run = np.where(over, self.run + 1, 0)
        return self.run >= self.steps


# ---------------------------------------------------------------------------
# Isolation


@dataclass
class EstimatorBelief:
    mu_q: np.ndarray
    mu_qd: np.ndarray

    @property
    def mu_x(self):
        return np.concatenate([self.mu_q, self.mu_qd], axis=-1)

    def copy(self):
        return EstimatorBelief(np.array(self.mu_q, dtype=float), np.array(self.mu_qd, dtype=float))


@dataclass(frozen=True)
class IsolationGains:
    kappa_p: float
    kappa_v: float


def free_energy_proprio(b: EstimatorBelief, y, P: UAICPrecisions, x_hat):
    e_q, e_qd, e_x = y.y_q - b.mu_q, y.y_qd - b.mu_qd, b.mu_x - x_hat
    from .uaic import logdet_excluding_zero as ld
    quadsum = (np.sum(e_q * mv(P.yq, e_q), -1) + np.sum(e_qd * mv(P.yqd, e_qd), -1)
               + np.sum(e_x * mv(P.x, e_x), -1))
    return 0.5 * (quadsum - ld(P.yq) - ld(P.yqd) - ld(P.x))


def free_energy_visual(b: EstimatorBelief, y, gpr, P: UAICPrecisions, x_hat):
    from .uaic import logdet_excluding_zero as ld
    e_v, e_x = y.y_v - gpr.predict(b.mu_q), b.mu_x - x_hat
    quadsum = np.sum(e_v * mv(P.yv, e_v), -1) + np.sum(e_x * mv(P.x, e_x), -1)
    return 0.5 * (quadsum - ld(P.yv) - ld(P.x))


def _proprio_step(b, y, P, kappa, dt):
    x_hat = predict_prior(b, dt)
    e_q, e_qd = y.y_q - b.mu_q, y.y_qd - b.mu_qd
    Pe_x = mv(P.x, b.mu_x - x_hat)
    g_q = -mv(P.yq, e_q) + Pe_x[..., :2]
    g_qd = -mv(P.yqd, e_qd) + Pe_x[..., 2:]
    new = EstimatorBelief(b.mu_q - kappa * dt * g_q, b.mu_qd - kappa * dt * g_qd)
    return new, np.concatenate([e_q, e_qd], axis=-1)


def _visual_step(b, y, gpr, P, kappa, dt, pred=None):
    x_hat = predict_prior(b, dt)
    g, J = gpr.predict_with_derivative(b.mu_q) if pred is None else pred
    e_v = y.y_v - g
    Pe_x = mv(P.x, b.mu_x - x_hat)
    g_q = -np.einsum("...ki,...k->...i", J, mv(P.yv, e_v)) + Pe_x[..., :2]
    g_qd = Pe_x[..., 2:]
    new = EstimatorBelief(b.mu_q - kappa * dt * g_q, b.mu_qd - kappa * dt * g_qd)
    return new, e_v


def isolation_estimators_step(y, proprio: EstimatorBelief, visual: EstimatorBelief, gpr,
                              P: UAICPrecisions, gains: IsolationGains, dt: float, step: int = 0,
                              pred_v=None):
    """Advance the proprioceptive and visual estimators by one gradient step.

    Each estimator only sees its own sensor group plus the constant-velocity
    prior; neither involves the control target. Returns
    ``(proprio', visual', r_p, r_v)`` with residuals taken before the update.
    ``pred_v`` optionally supplies the GPR mean and Jacobian at ``visual.mu_q``.
    """
    p_new, r_p = _proprio_step(proprio, y, P, gains.kappa_p, dt)
    v_new, r_v = _visual_step(visual, y, gpr, P, gains.kappa_v, dt, pred_v)
    for name, b in (("proprioceptive", p_new), ("visual", v_new)):
        if not (np.all(np.isfinite(b.mu_q)) and np.all(np.isfinite(b.mu_qd))):
            raise IsolationEstimatorError(step, name)
    return p_new, v_new, r_p, r_v


@dataclass
class FaultVerdict:
    detected: bool = False
    detection_step: int | None = None
    location: str | None = None
    isolation_step: int | None = None

    def __post_init__(self):
        if self.location is not None and not self.detected:
            raise InvalidInputError("a location requires a detection")
        if self.location is not None and self.location not in LOCATIONS:
            raise InvalidInputError(f"unknown fault location {self.location!r}")
        if self.isolation_step is not None and self.detection_step is not None \
                and self.isolation_step < self.detection_step:
            raise InvalidInputError("isolation cannot precede detection")

    @property
    def code(self) -> int:
        return 0 if self.location is None else LOCATIONS.index(self.location) + 1


def isolate(alarm: bool, over_p: bool, over_v: bool) -> str | None:
    """Decision table for one step of the confirmation window.

    Returns a location, or ``None`` to keep waiting.
    """
    if not alarm:
        return None
    if over_p and not over_v:
        return ENCODER
    if over_v and not over_p:
        return CAMERA
    if over_p and over_v:
        return UNKNOWN
    return None


class Isolator:
    """Per-run detection/isolation state machine, batched over runs.

    A confirmed main alarm opens a window of ``window`` steps; the first
    step inside it where exactly one subsystem is (confirmed) over its own
    threshold names the fault. Both over at once, or neither for the whole
    window, gives ``unknown`` and the isolator re-arms for the next alarm.
    A concrete verdict is final.
    """

    def __init__(self, batch: int, window: int):
        self.window = window
        self.detect_step = np.full(batch, -1)
        self.open_since = np.full(batch, -1)
        self.verdict = np.zeros(batch, dtype=int)
        self.isolation_step = np.full(batch, -1)

    def update(self, k, alarm, over_p, over_v):
        """Advance one step; returns the mask of runs that got a concrete verdict now."""
        final = self.verdict > 1
        first = alarm & (self.detect_step < 0)
        self.detect_step[first] = k
        opening = alarm & (self.open_since < 0) & ~final
        self.open_since[opening] = k
        active = (self.open_since >= 0) & ~final
        newly = np.zeros_like(active)
        if not active.any():
            return newly
        enc = active & over_p & ~over_v
        cam = active & over_v & ~over_p
        both = active & over_p & over_v
        timeout = active & ~(enc | cam | both) & (k - self.open_since >= self.window - 1)
        for mask, code in ((enc, 2), (cam, 3)):
            self.verdict[mask] = code
            self.isolation_step[mask] = k
            newly |= mask
        unk = both | timeout
        self.verdict[unk & (self.verdict == 0)] = 1
        self.isolation_step[unk & (self.isolation_step < 0)] = k
        self.open_since[unk] = -1
        return newly

    def verdict_for(self, i: int) -> FaultVerdict:
        det = self.detect_step[i] >= 0
        code = self.verdict[i]
        return FaultVerdict(bool(det), int(self.detect_step[i]) if det else None,
                            LOCATIONS[code - 1] if code else None,
                            int(self.isolation_step[i]) if code else None)


def recover(P: UAICPrecisions, verdict: FaultVerdict, zero_velocity: bool = True) -> UAICPrecisions:
    """Switch off the precision of the isolated sensor group.

    ``encoder_or_velocity`` zeroes ``P_yq`` (and ``P_yqd`` unless
    ``zero_velocity`` is False); ``camera`` zeroes ``P_yv``.
    """
    if verdict.location in (None, UNKNOWN):
        warnings.warn("fault not isolated; precisions left unchanged", RuntimeWarning, stacklevel=2)
        return P
    if verdict.location == CAMERA:
        return replace(P, yv=np.zeros_like(P.yv))
    out = replace(P, yq=np.zeros_like(P.yq))
    if zero_velocity:
        out = replace(out, yqd=np.zeros_like(P.yqd))
    return out


def recover_runs(P: UAICPrecisions, codes, mask, zero_velocity: bool = True):
    """In-place batched recovery for runs in ``mask`` given verdict ``codes``."""
    enc = mask & (codes == 2)
    cam = mask & (codes == 3)
    P.yq[enc] = 0.0
    if zero_velocity:
        P.yqd[enc] = 0.0
    P.yv[cam] = 0.0
    return P
