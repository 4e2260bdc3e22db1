"""Per-run trajectory records and the summary metrics computed from them."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..fdi import LOCATIONS
from .sim import FULL_FIELDS, BatchResult


@dataclass
class TrajectoryLog:
    """Every per-step series of one run; ``series[name]`` has shape (T, ...)."""

    dt: float
    threshold: float
    series: dict
    switch_steps: list = field(default_factory=lambda: [0])
    fault_step: int = -1
    seed: int = 0

    def __post_init__(self):
        lengths = {len(v) for v in self.series.values()}
        if len(lengths) > 1:
            raise ValueError("all series must have the same number of steps")

    def __len__(self):
        return len(self.series["q"])

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self))

    @property
    def t(self) -> np.ndarray:
        return self.k * self.dt

    def __getattr__(self, name):
        series = self.__dict__.get("series")
        if series is not None and name in series:
            return series[name]
        raise AttributeError(name)

    @classmethod
    def empty(cls, dt=1e-3, threshold=np.nan) -> "TrajectoryLog":
        return cls(dt, threshold, {k: np.zeros((0,) + s) for k, s in FULL_FIELDS.items()})

    @classmethod
    def from_batch(cls, res: BatchResult, i: int = 0) -> "TrajectoryLog":
        if res.full is None:
            raise ValueError("batch was not recorded in full")
        cfg = res.cfg
        kf = cfg.fault.build().start_step(cfg.dt) if cfg.fault.kind != "none" else -1
        return cls(cfg.dt, res.threshold, {k: v[i] for k, v in res.full.items()},
                   cfg.switch_steps(), kf, res.seeds[i])

    def onsets(self) -> list:
        a = np.nan_to_num(self.series["alarm"]).astype(bool)
        prev = np.concatenate([[False], a[:-1]])
        return np.flatnonzero(a & ~prev).tolist()


@dataclass
class Metrics:
    e_ss: list                     # signed mean (q - mu_d) per joint over the last second
    rmse: list                     # per joint, belief vs true position over the whole run
    e_ss_segments: list            # e_ss at the end of each waypoint segment
    detection_delay: float | None  # first confirmed alarm after the fault minus fault time
    isolation_delay: float | None
    verdict: str | None
    false_alarms: int              # confirmed alarm onsets before the fault (whole run if none)
    max_normalized: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _window_mean(x, end, width):
    return x[max(0, end - width):end].mean(axis=0)


def metrics_from_arrays(q, mu_q, targets, dt, switch_steps, onsets, fault_step=-1,
                        verdict_code=0, isolation_step=-1, max_normalized=np.nan) -> Metrics:
    """Core metric computation shared by single logs and batched results."""
    T = len(q)
    if T == 0:
        nan2 = [float("nan")] * 2
        return Metrics(nan2, nan2, [], None, None, None, 0, None)
    win = max(1, int(round(1.0 / dt)))
    err = q - targets
    e_ss = _window_mean(err, T, win)
    ends = list(switch_steps[1:]) + [T]
    segs = [_window_mean(err, e, win).tolist() for e in ends if e > 0]
    rmse = np.sqrt(np.mean((mu_q - q) ** 2, axis=0))
    if fault_step >= 0:
        false = [k for k in onsets if k < fault_step]
        after = [k for k in onsets if k >= fault_step]
        delay = (after[0] - fault_step) * dt if after else None
        iso = (isolation_step - fault_step) * dt if verdict_code > 1 and isolation_step >= fault_step else None
    else:
        false, delay, iso = list(onsets), None, None
    verdict = LOCATIONS[verdict_code - 1] if verdict_code else None
    mx = float(max_normalized) if np.isfinite(max_normalized) else None
    return Metrics(e_ss.tolist(), rmse.tolist(), segs, delay, iso, verdict, len(false), mx)


def compute_metrics(log: TrajectoryLog) -> Metrics:
    s = log.series
    verdict = np.nan_to_num(s["verdict"]).astype(int)
    code = int(verdict[-1]) if len(verdict) else 0
    iso = -1
    if code > 1:
        iso = int(np.argmax(verdict == code))
    norm = s["normalized"]
    mx = np.nanmax(norm) if len(norm) and np.any(np.isfinite(norm)) else np.nan
    return metrics_from_arrays(s["q"], s["mu_q"], s["target"], log.dt, log.switch_steps, log.onsets(),
                               log.fault_step, code, iso, mx)


def batch_metrics(res: BatchResult) -> list:
    cfg = res.cfg
    kf = cfg.fault.build().start_step(cfg.dt) if cfg.fault.kind != "none" else -1
    return [metrics_from_arrays(res.q[i], res.mu_q[i], res.targets, cfg.dt, cfg.switch_steps(),
                                res.alarm_onsets[i], kf, int(res.verdict[i]), int(res.isolation_step[i]),
                                res.max_normalized[i])
            for i in range(len(res))]


def _flatten(m: Metrics) -> dict:
    out = {}
    for j in range(2):
        out[f"e_ss_q{j + 1}"] = m.e_ss[j]
        out[f"rmse_q{j + 1}"] = m.rmse[j]
    out["detection_delay"] = m.detection_delay
    out["isolation_delay"] = m.isolation_delay
    out["false_alarms"] = m.false_alarms
    return out


def aggregate(metrics: list, seeds: list) -> dict:
    """Mean and std of every numeric metric over runs, reduced in seed order.

    Missing values (e.g. no detection) are skipped and counted.
    """
    order = np.argsort(seeds, kind="stable")
    rows = [_flatten(metrics[i]) for i in order]
    summary = {"runs": len(rows)}
    for key in rows[0] if rows else []:
        vals = np.array([r[key] for r in rows if r[key] is not None], dtype=float)
        summary[key] = {
            "mean": float(vals.mean()) if len(vals) else None,
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else (0.0 if len(vals) else None),
            "count": int(len(vals)),
        }
    verdicts = [metrics[i].verdict for i in order]
    summary["verdicts"] = {str(v): verdicts.count(v) for v in sorted(set(verdicts), key=str)}
    return summary
