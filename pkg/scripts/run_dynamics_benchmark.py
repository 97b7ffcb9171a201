#!/usr/bin/env python3
"""Multi-step dynamics prediction benchmark.

Trains the homography dynamics model against an unstructured MLP and a
copy-last-frame baseline on one environment, then reports mean IoU per
rollout step on held-out episodes.  Results are cached by parameters and
code hash.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cade.experiments import cached_dynamics_study


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("env", choices=["planar-river", "cliff-circular"])
    ap.add_argument("--level", default="medium")
    ap.add_argument("--cache", default="artifacts/acceptance-cache")
    ap.add_argument("--n-train", type=int, default=1720)
    ap.add_argument("--n-test", type=int, default=492)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--horizon", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="write results to this file")
    args = ap.parse_args()

    result = cached_dynamics_study(
        args.cache, env_name=args.env, level=args.level,
        n_train=args.n_train, n_test=args.n_test, epochs=args.epochs,
        batch=args.batch, horizon=args.horizon, seed=args.seed)

    kinds = list(result["rows"])
    steps = [row["step"] for row in result["rows"][kinds[0]]]
    header = f"{'step':<6}" + "".join(f"{k:>16}" for k in kinds)
    print(f"IoU by rollout step ({args.env}, {args.level})")
    print(header)
    for i, step in enumerate(steps):
        cells = "".join(
            f"{result['rows'][k][i]['iou_mean']:10.3f}±"
            f"{result['rows'][k][i]['iou_std']:<5.3f}" for k in kinds)
        print(f"{step:<6}{cells}")
    for kind, iou in result.get("known_iou", {}).items():
        print(f"{kind} one-step IoU on known cells: {iou:.3f}")
    print(f"train time: {result['train_seconds']:.1f}s")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)
        print(f"wrote {args.json}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
