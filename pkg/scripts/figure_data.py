"""Plot-ready data for the standard figures.

Writes one directory per scenario under ``--out``: the goal-change bias of
the standard controller, and encoder-freeze / camera-bias runs with and
without recovery (trajectory, metrics and normalized statistic files).
"""

import argparse
import sys
from pathlib import Path

from aiftc.harness.cli import main as cli

SCENARIOS = [
    ("encoder_recovery", ["--fault", "encoder", "--recovery", "on"]),
    ("encoder_no_recovery", ["--fault", "encoder", "--recovery", "off"]),
    ("camera_recovery", ["--fault", "camera", "--recovery", "on"]),
    ("camera_no_recovery", ["--fault", "camera", "--recovery", "off"]),
    ("healthy", ["--fault", "none"]),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/figures")
    args = ap.parse_args()
    common = (["--config", args.config] if args.config else []) + ["--seed", str(args.seed)]
    out = Path(args.out)

    code = cli(["bias-demo", *common, "--out", str(out / "bias_demo")])
    for name, flags in SCENARIOS:
        code = code or cli(["run", *common, *flags, "--out", str(out / name)])
    sys.exit(code)


if __name__ == "__main__":
    main()
