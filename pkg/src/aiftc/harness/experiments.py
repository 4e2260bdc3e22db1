"""Experiment drivers shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import logging

import numpy as np

from .config import ScenarioConfig
from .metrics import TrajectoryLog, aggregate, batch_metrics
from .sim import simulate_batch

log = logging.getLogger(__name__)

FAULT_ALIASES = {"none": "none", "encoder": "encoder_freeze", "camera": "camera_bias"}


def run_scenario(cfg: ScenarioConfig, gpr, calibration=None) -> TrajectoryLog:
    """One fully recorded run of ``cfg`` with its own seed."""
    res = simulate_batch(cfg, [cfg.seed], gpr, calibration, record="full")
    return TrajectoryLog.from_batch(res, 0)


def montecarlo(cfg: ScenarioConfig, gpr, calibration=None, runs: int = 10, first_seed: int | None = None,
               batch: int = 100):
    """Seeded runs ``first_seed .. first_seed + runs - 1`` in batches.

    Returns ``(seeds, metrics, summary)``.
    """
    first = cfg.seed if first_seed is None else first_seed
    seeds = list(range(first, first + runs))
    metrics = []
    for start in range(0, runs, batch):
        res = simulate_batch(cfg, seeds[start:start + batch], gpr, calibration)
        metrics += batch_metrics(res)
        log.info("montecarlo: %d/%d runs", len(metrics), runs)
    return seeds, metrics, aggregate(metrics, seeds)


def spike_ratio(spe, switch_step: int, window: int) -> float:
    """Peak of ``spe`` in the window after a goal change over its mean in the window before."""
    before = spe[max(0, switch_step - window):switch_step]
    after = spe[switch_step:switch_step + window]
    return float(after.max() / before.mean())


def bias_demo(cfg: ScenarioConfig, gpr, calibration=None, window: float = 0.5) -> dict:
    """Position-SPE spike of the standard controller at each goal change, next
    to the u-AIC detection statistic over the same healthy scenario."""
    healthy = cfg.replace(**{"fault.kind": "none"})
    aic = simulate_batch(healthy.replace(controller="aic"), [cfg.seed], gpr, record="full")
    uaic = simulate_batch(healthy.replace(controller="uaic"), [cfg.seed], gpr, calibration, record="full")
    w = int(round(window / cfg.dt))
    switches = cfg.switch_steps()[1:]
    return {
        "t": np.arange(cfg.steps) * cfg.dt,
        "aic_spe_q": aic.spe_q[0],
        "uaic_spe_q": uaic.spe_q[0],
        "uaic_normalized": uaic.full["normalized"][0],
        "switch_steps": switches,
        "aic_spike_ratios": [spike_ratio(aic.spe_q[0], s, w) for s in switches],
        "uaic_max_normalized": float(np.nanmax(uaic.full["normalized"][0])) if calibration else None,
    }
