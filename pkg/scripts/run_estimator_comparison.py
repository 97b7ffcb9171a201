#!/usr/bin/env python3
"""Advantage-estimator comparison on the circular cliff task.

Trains one run per (estimator, seed) at the study defaults, then reports
the mean episodic reward over the final tenth of training.  Runs are
cached by config and code hash, so re-invocations only print.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cade.experiments import (ESTIMATOR_SET, STUDY_SEEDS, estimator_comparison,
                              estimator_study_config)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default="artifacts/acceptance-cache",
                    help="run cache directory")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(STUDY_SEEDS))
    ap.add_argument("--estimators", nargs="+", default=list(ESTIMATOR_SET))
    ap.add_argument("--budget", type=int, default=None,
                    help="override the training step budget")
    ap.add_argument("--fraction", type=float, default=0.1,
                    help="final window as a fraction of iterations")
    ap.add_argument("--json", default=None, help="write results to this file")
    args = ap.parse_args()

    overrides = {} if args.budget is None else {"step_budget": args.budget}
    base = estimator_study_config(**overrides)
    results = estimator_comparison(base, args.estimators, args.seeds,
                                   args.cache, fraction=args.fraction)

    print(f"{'estimator':<12} " +
          " ".join(f"seed{s:<2}" for s in args.seeds) + "   mean")
    means = {}
    for adv, finals in results.items():
        means[adv] = float(np.mean(finals))
        cells = " ".join(f"{v:6.2f}" for v in finals)
        print(f"{adv:<12} {cells}  {means[adv]:6.2f}")
    best = max(means, key=means.get)
    print(f"best final-window reward: {best} ({means[best]:.2f})")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"finals": results, "means": means}, fh, indent=2)
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
