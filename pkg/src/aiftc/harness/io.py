"""Plot-ready outputs: trajectory CSV, metrics JSON and the normalized-statistic series."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .metrics import Metrics, TrajectoryLog
from .sim import FULL_FIELDS

# column name -> (series, component); component None for scalar series
COLUMNS = [("k", None, None), ("t", None, None)]
_NAMES = {
    "q": ("q1", "q2"), "qd": ("qd1", "qd2"), "mu_q": ("mu_q1", "mu_q2"), "mu_qd": ("mu_qd1", "mu_qd2"),
    "mu_u": ("mu_u1", "mu_u2"), "u": ("u1", "u2"),
    "y": ("y_q1", "y_q2", "y_qd1", "y_qd2", "y_vx", "y_vz"), "target": ("target1", "target2"),
    "spe": ("spe_q", "spe_qd", "spe_v"),
}
for _series in FULL_FIELDS:
    if _series in _NAMES:
        COLUMNS += [(name, _series, j) for j, name in enumerate(_NAMES[_series])]
    else:
        COLUMNS.append((_series, _series, None))
COLUMNS.insert(COLUMNS.index(("normalized", "normalized", None)), ("threshold", None, None))
HEADER = [c[0] for c in COLUMNS]
_INT_COLUMNS = {"k", "alarm", "verdict"}


def _fmt(x) -> str:
    return "%.17g" % x


def _row_arrays(log: TrajectoryLog):
    n = len(log)
    cols = []
    for name, series, j in COLUMNS:
        if name == "k":
            cols.append(log.k.astype(float))
        elif name == "t":
            cols.append(log.t)
        elif name == "threshold":
            cols.append(np.full(n, log.threshold))
        else:
            a = log.series[series]
            cols.append(a if j is None else a[:, j])
    return cols


def write_trajectory_csv(log: TrajectoryLog, path):
    path = Path(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            cols = _row_arrays(log)
            for i in range(len(log)):
                w.writerow([str(int(c[i])) if name in _INT_COLUMNS and np.isfinite(c[i]) else _fmt(c[i])
                            for (name, _, _), c in zip(COLUMNS, cols)])
    except OSError as exc:
        raise OSError(f"cannot write trajectory CSV {path}: {exc}") from exc


def read_trajectory_csv(path, dt=None, threshold=None, **meta) -> TrajectoryLog:
    """Parse a trajectory CSV back into a log (exact for logs written here)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HEADER:
        raise ValueError(f"{path}: unexpected header")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(HEADER))
    series = {}
    for s, shape in FULL_FIELDS.items():
        idx = [i for i, c in enumerate(COLUMNS) if c[1] == s]
        series[s] = np.ascontiguousarray(data[:, idx[0]] if not shape else data[:, idx])
    if dt is None:
        t = data[:, 1]
        dt = float(t[1] - t[0]) if len(t) > 1 else 1e-3
    if threshold is None:
        thr = data[:, HEADER.index("threshold")]
        threshold = float(thr[0]) if len(thr) else float("nan")
    return TrajectoryLog(dt, threshold, series, **meta)


def write_normalized_csv(log: TrajectoryLog, path):
    """Time series of the normalized detection statistic (statistic / threshold)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "t", "normalized", "alarm"])
        for k, t, v, a in zip(log.k, log.t, log.series["normalized"], log.series["alarm"]):
            w.writerow([int(k), _fmt(t), _fmt(v), int(a)])


def write_json(data: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def emit_outputs(log: TrajectoryLog, metrics: Metrics, outdir) -> dict:
    """Write ``trajectory.csv``, ``metrics.json`` and ``dm_normalized.csv`` into ``outdir``."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {"trajectory": out / "trajectory.csv", "metrics": out / "metrics.json",
             "normalized": out / "dm_normalized.csv"}
    write_trajectory_csv(log, paths["trajectory"])
    write_json(metrics.to_dict(), paths["metrics"])
    write_normalized_csv(log, paths["normalized"])
    return paths
