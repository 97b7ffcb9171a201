#!/usr/bin/env python3
"""Constrained vs unconstrained training, evaluated across difficulty levels.

Both variants train on the medium level only; evaluation sweeps every
level, so the off-trained levels measure transfer.  Runs are cached by
config and code hash.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cade.envs import LEVELS
from cade.experiments import (STUDY_SEEDS, safety_comparison,
                              safety_study_config)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default="artifacts/acceptance-cache",
                    help="run cache directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(STUDY_SEEDS))
    ap.add_argument("--levels", nargs="+", default=list(LEVELS))
    ap.add_argument("--episodes", type=int, default=30,
                    help="evaluation episodes per (seed, level)")
    ap.add_argument("--budget", type=int, default=None,
                    help="override the training step budget")
    ap.add_argument("--json", default=None, help="write results to this file")
    args = ap.parse_args()

    overrides = {} if args.budget is None else {"step_budget": args.budget}
    base = safety_study_config(**overrides)
    results = safety_comparison(base, args.seeds, args.levels, args.episodes,
                                args.cache)

    print(f"{'variant':<12} {'level':<8} {'reward':>8} {'cost':>8}")
    for name, per_level in results.items():
        for level, summary in per_level.items():
            print(f"{name:<12} {level:<8} {summary['reward_mean']:8.2f} "
                  f"{summary['cost_mean']:8.2f}")

    wins = sum(
        results["lagrangian"][lv]["reward_mean"] >= results["plain"][lv]["reward_mean"]
        and results["lagrangian"][lv]["cost_mean"] <= results["plain"][lv]["cost_mean"]
        for lv in args.levels)
    print(f"lagrangian dominates plain on {wins}/{len(args.levels)} levels")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
