"""Artifact production: GPR training data, trained model and calibration."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .. import gpr as G
from ..errors import CalibrationMismatchError, InsufficientCalibrationError
from ..plant import camera_project, forward_kinematics
from .config import ScenarioConfig, calibration_key
from .sim import CalibrationSet, calibrate

log = logging.getLogger(__name__)


def training_set(cfg: ScenarioConfig) -> G.GPRTrainingSet:
    """Noisy camera readings on a joint-space grid covering the task region."""
    gc = cfg.gpr
    q1 = np.linspace(*gc.q1_range, gc.grid)
    q2 = np.linspace(*gc.q2_range, gc.grid)
    q = np.stack(np.meshgrid(q1, q2, indexing="ij"), axis=-1).reshape(-1, 2)
    clean = camera_project(forward_kinematics(q, cfg.plant.build()), cfg.camera.build())
    rng = np.random.default_rng(gc.seed)
    return G.GPRTrainingSet(q, clean + gc.noise * rng.standard_normal(q.shape))


def train_gpr(cfg: ScenarioConfig, train: G.GPRTrainingSet | None = None) -> G.GPRModel:
    gc = cfg.gpr
    train = training_set(cfg) if train is None else train
    init = G.GPRHyperparams(gc.signal_var, gc.noise_var, tuple(gc.theta))
    res = G.optimize_hyperparams(train, init, restarts=gc.restarts, max_iter=gc.max_iter, seed=gc.seed)
    log.info("GPR hyperparameters %s (log-likelihood %.1f -> %.1f)", res.hyper,
             res.initial_log_likelihood, res.log_likelihood)
    return G.fit(train, res.hyper)


def load_or_train_gpr(cfg: ScenarioConfig, path=None) -> G.GPRModel:
    path = Path(path or cfg.gpr_path)
    if path.exists():
        return G.load_model(path)
    model = train_gpr(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    G.save_model(path, model)
    return model


def build_calibration(cfg: ScenarioConfig, model: G.GPRModel, runs: int | None = None,
                      path=None) -> CalibrationSet:
    cal = calibrate(cfg, model, runs, key=calibration_key(cfg, model))
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        cal.save(path)
    return cal


def load_calibration(cfg: ScenarioConfig, model: G.GPRModel, path=None) -> CalibrationSet:
    """Load a calibration artifact and check it was made for this scenario."""
    path = Path(path or cfg.calibration_path)
    if not path.exists():
        raise InsufficientCalibrationError(f"no calibration artifact at {path}; run `calibrate` first")
    cal = CalibrationSet.load(path)
    want = calibration_key(cfg, model)
    if cal.key != want:
        raise CalibrationMismatchError(f"{path} was calibrated for scenario {cal.key}, not {want}")
    return cal
