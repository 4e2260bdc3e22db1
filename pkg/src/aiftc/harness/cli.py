"""Command-line entry point (``aiftc`` or ``python -m aiftc``)."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .. import gpr as G
from ..errors import (CalibrationMismatchError, ConfigError, DivergenceError, InsufficientCalibrationError)
from . import io, pipeline
from .config import ScenarioConfig, load_config
from .experiments import FAULT_ALIASES, bias_demo, montecarlo, run_scenario
from .metrics import compute_metrics

log = logging.getLogger("aiftc")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_CALIBRATION = 0, 2, 3, 4


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        changes["fdi.alpha"] = args.alpha
    if getattr(args, "fault", None) is not None:
        changes["fault.kind"] = FAULT_ALIASES[args.fault]
    if getattr(args, "recovery", None) is not None:
        changes["recovery"] = args.recovery == "on"
    if getattr(args, "controller", None) is not None:
        changes["controller"] = args.controller
    return cfg.replace(**changes) if changes else cfg


def _needs_calibration(cfg: ScenarioConfig) -> bool:
    return cfg.controller == "uaic" and cfg.detection


def cmd_train_gpr(args):
    cfg = _config(args)
    out = Path(args.out or cfg.gpr_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    train = pipeline.training_set(cfg)
    G.save_training_csv(out.with_suffix(".csv"), train)
    model = pipeline.train_gpr(cfg, train)
    G.save_model(out, model)
    print(f"GPR model written to {out} (hyperparameters {model.hyper})")


def cmd_calibrate(args):
    cfg = _config(args)
    model = pipeline.load_or_train_gpr(cfg)
    out = Path(args.out or cfg.calibration_path)
    cal = pipeline.build_calibration(cfg, model, args.runs, out)
    print(f"calibration over {cal.main.n_runs} healthy runs written to {out} (scenario {cal.key})")


def cmd_run(args):
    cfg = _config(args)
    model = pipeline.load_or_train_gpr(cfg)
    cal = pipeline.load_calibration(cfg, model) if _needs_calibration(cfg) else None
    trajectory = run_scenario(cfg, model, cal)
    metrics = compute_metrics(trajectory)
    paths = io.emit_outputs(trajectory, metrics, args.out)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    print(f"e_ss {metrics.e_ss}  rmse {metrics.rmse}  detection delay {metrics.detection_delay}  "
          f"verdict {metrics.verdict}")


def cmd_montecarlo(args):
    cfg = _config(args)
    model = pipeline.load_or_train_gpr(cfg)
    cal = pipeline.load_calibration(cfg, model) if _needs_calibration(cfg) else None
    seeds, metrics, summary = montecarlo(cfg, model, cal, args.runs, cfg.seed, args.batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(summary, out / "montecarlo.json")
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "e_ss_q1", "e_ss_q2", "rmse_q1", "rmse_q2", "detection_delay",
                    "isolation_delay", "verdict", "false_alarms"])
        for s, m in zip(seeds, metrics):
            w.writerow([s, *m.e_ss, *m.rmse, m.detection_delay, m.isolation_delay, m.verdict, m.false_alarms])
    print(f"{args.runs} runs summarized in {out / 'montecarlo.json'}")


def cmd_metrics(args):
    cfg = _config(args)
    kf = cfg.fault.build().start_step(cfg.dt) if cfg.fault.kind != "none" else -1
    trajectory = io.read_trajectory_csv(args.trajectory, switch_steps=cfg.switch_steps(), fault_step=kf)
    metrics = compute_metrics(trajectory)
    if args.out:
        io.write_json(metrics.to_dict(), args.out)
    print(metrics.to_dict())


def cmd_bias_demo(args):
    cfg = _config(args)
    model = pipeline.load_or_train_gpr(cfg)
    try:
        cal = pipeline.load_calibration(cfg.replace(controller="uaic"), model)
    except (InsufficientCalibrationError, CalibrationMismatchError) as exc:
        log.warning("%s; showing the standard controller only", exc)
        cal = None
    demo = bias_demo(cfg, model, cal)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["t", "aic_spe_q", "uaic_spe_q", "uaic_normalized"]
    np.savetxt(out / "bias_demo.csv", np.column_stack([demo[c] for c in cols]), delimiter=",",
               header=",".join(cols), comments="", fmt="%.17g")
    print(f"standard AIC position-SPE spike ratio at goal changes: {demo['aic_spike_ratios']}")
    print(f"u-AIC max normalized statistic: {demo['uaic_max_normalized']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aiftc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="scenario JSON file (defaults if omitted)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("train-gpr", cmd_train_gpr, "fit the camera observation model")
    sp.add_argument("--out", help="model artifact path (.npz)")

    sp = add("calibrate", cmd_calibrate, "healthy Monte Carlo calibration of residual statistics")
    sp.add_argument("--runs", type=int, help="number of healthy runs")
    sp.add_argument("--out", help="calibration artifact path (.npz)")

    for name, fn, help_ in (("run", cmd_run, "one seeded scenario with outputs"),
                            ("montecarlo", cmd_montecarlo, "seeded sweep with aggregated metrics")):
        sp = add(name, fn, help_)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--fault", choices=sorted(FAULT_ALIASES))
        sp.add_argument("--recovery", choices=["on", "off"])
        sp.add_argument("--controller", choices=["aic", "uaic"])
        if name == "montecarlo":
            sp.add_argument("--runs", type=int, default=10)
            sp.add_argument("--batch", type=int, default=100, help="runs simulated side by side")

    sp = add("metrics", cmd_metrics, "recompute metrics from a trajectory CSV")
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--fault", choices=sorted(FAULT_ALIASES))
    sp.add_argument("--out")

    sp = add("bias-demo", cmd_bias_demo, "goal-change spike of the standard controller")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InsufficientCalibrationError, CalibrationMismatchError) as exc:
        print(f"calibration: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
