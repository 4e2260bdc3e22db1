"""Per-step false-alarm rate of the calibrated detector on fresh healthy runs.

For each alpha the exceedance count x over n (run, step) samples is compared
with alpha through the one-sided 95% Clopper-Pearson upper bound.

    python scripts/false_alarm_rate.py --runs 500
"""

import argparse
import logging

import numpy as np
from scipy import stats

from aiftc.harness import pipeline
from aiftc.harness.config import ScenarioConfig, load_config
from aiftc.harness.sim import simulate_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--runs", type=int, default=500)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--batch", type=int, default=100)
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.01, 0.05, 0.1])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config) if args.config else ScenarioConfig()
    cfg = cfg.replace(**{"fault.kind": "none"})
    model = pipeline.load_or_train_gpr(cfg)
    cal = pipeline.load_calibration(cfg, model)

    x = dict.fromkeys(args.alphas, 0)
    n = 0
    seeds = range(args.first_seed, args.first_seed + args.runs)
    for start in range(0, args.runs, args.batch):
        res = simulate_batch(cfg, seeds[start:start + args.batch], model, cal)
        n += int(np.isfinite(res.stat).sum())
        for a in args.alphas:
            x[a] += int(res.exceedances(a).sum())
        logging.info("%d/%d runs", min(start + args.batch, args.runs), args.runs)

    failed = False
    for a in args.alphas:
        upper = stats.beta.ppf(0.95, x[a] + 1, n - x[a])
        failed |= upper > a
        print(f"alpha {a:<6g} exceedances {x[a]:>8d}/{n}  rate {x[a] / n:.2e}  95% upper {upper:.2e}  "
              f"{'ok' if upper <= a else 'ABOVE alpha'}")
    raise SystemExit(1 if failed else 0)


if __name__ == "__main__":
    main()
