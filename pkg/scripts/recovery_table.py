"""Steady-state error and belief RMSE per fault, with and without recovery.

Seeded Monte Carlo over identical seeds for every row; prints mean (std)
per joint and writes the full summary as JSON.

    python scripts/recovery_table.py --runs 100 --out results/table.json
"""

import argparse
import json
import logging
from pathlib import Path

from aiftc.harness import pipeline
from aiftc.harness.config import ScenarioConfig, load_config
from aiftc.harness.experiments import montecarlo

ROWS = [("encoder_freeze", False), ("encoder_freeze", True), ("camera_bias", False), ("camera_bias", True)]


def _cell(summary, key):
    s = summary[key]
    return f"{s['mean']:+.2e} ({s['std']:.1e})" if s["mean"] is not None else "n/a"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="scenario JSON (defaults if omitted)")
    ap.add_argument("--runs", type=int, default=100)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--out", default="results/recovery_table.json")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_config(args.config) if args.config else ScenarioConfig()
    model = pipeline.load_or_train_gpr(base)
    cal = pipeline.load_calibration(base, model)

    table = {}
    print(f"{'fault':16s} {'recovery':9s} {'e_ss q1':>22s} {'e_ss q2':>22s} {'RMSE q1':>22s} {'RMSE q2':>22s}")
    for kind, rec in ROWS:
        cfg = base.replace(**{"fault.kind": kind, "recovery": rec})
        _, _, summary = montecarlo(cfg, model, cal, args.runs, args.first_seed, args.batch)
        table[f"{kind}/{'on' if rec else 'off'}"] = summary
        print(f"{kind:16s} {'on' if rec else 'off':9s} "
              + " ".join(f"{_cell(summary, k):>22s}" for k in ("e_ss_q1", "e_ss_q2", "rmse_q1", "rmse_q2")))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print(f"summary written to {out}")


if __name__ == "__main__":
    main()
