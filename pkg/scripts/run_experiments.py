#!/usr/bin/env python3
"""End-to-end demo of the full experiment pipeline through the CLI.

Generates a phantom, injects a duplication artifact, runs both regression
modes, scores them, and runs a small dropout sweep.  Results land under the
chosen workspace directory; see README for the file formats.

Usage:
    python scripts/run_experiments.py --workdir /tmp/gdr-demo [--full]
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def run(args):
    print("+", " ".join(str(a) for a in args))
    subprocess.run([sys.executable, "-m", "gdr.cli", *map(str, args)], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="gdr-demo")
    ap.add_argument("--full", action="store_true",
                    help="full-size sweep (0-50%% x 3 repeats) instead of a quick one")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    config = work / "config.json"
    config.write_text(json.dumps({
        "levels": [[12.0, 4, 0.1], [6.0, 2, 0.05], [3.0, 1, 0.05]],
        "k": 6,
        "max_iters": 150,
    }, indent=2))

    series = work / "phantom"
    run(["phantom", "--dims", "64,64", "--amplitude", "6", "--phases", "6",
         "--seed", args.seed, "--texture", "fine", "--landmarks", "20",
         "--out", series, "--force"])

    injected = work / "with-artifact"
    run(["inject", "--series", series, "--duplication-mm", "8", "--phase", "2",
         "--out", injected, "--force"])

    for mode in ("gdr", "gir"):
        result = work / f"result-{mode}"
        run(["regress", "--series", injected, "--config", config,
             "--mode", mode, "--out", result, "--force"])
        run(["eval", "--truth-dir", injected, "--result-dir", result])
        print(f"metrics: {result}/metrics.csv")

    sweep = work / "sweep"
    levels = "0,10,20,30,40,50" if args.full else "0,20,40"
    repeats = "3" if args.full else "1"
    run(["sweep-dropout", "--series", series, "--levels", levels,
         "--repeats", repeats, "--config", config, "--out", sweep, "--force"])
    print(f"sweep rows: {sweep}/sweep.csv")


if __name__ == "__main__":
    main()
