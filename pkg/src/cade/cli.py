"""Command-line entry point: train / eval / dyn-bench / collect.

Precedence is flags over config file over defaults; the fully resolved
config is validated (unknown keys rejected by name) and echoed into the run
manifest.  Exit codes: 0 success, 2 bad config or flags, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import (ADV_CHOICES, ENV_CHOICES, LEVEL_CHOICES, SAFETY_MODES,
                     ConfigError, RunConfig, load_config_file)
from .dynbench import (MODEL_KINDS, DatasetError, collect_dataset,
                       rollout_eval, train_dyn, write_dyn_metrics)
from .envs import make_env
from .gridio import write_pgm
from .trainer import (TrainerError, evaluate, safety_config, summarize,
                      train, write_metrics_csv)

__all__ = ["main", "build_parser", "resolve_config", "run_name"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cade",
        description="Constrained recurrent policy training on patch-grid worlds.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--env", choices=ENV_CHOICES)
        p.add_argument("--level", choices=LEVEL_CHOICES)
        p.add_argument("--seed", type=int)
        p.add_argument("--timeout", type=int)
        p.add_argument("--out-dir")

    p_train = sub.add_parser("train", help="run one training seed")
    common(p_train)
    p_train.add_argument("--adv", choices=ADV_CHOICES)
    p_train.add_argument("--safety-layer", choices=SAFETY_MODES,
                         help="screen proposed actions during train/infer/both")
    p_train.add_argument("--step-budget", type=int)
    p_train.add_argument("--lagrange", action="store_true", default=None,
                         help="enable the episodic cost constraint")
    p_train.add_argument("--no-lagrange", dest="lagrange",
                         action="store_false")
    p_train.add_argument("--normalize-adv", action="store_true", default=None)
    p_train.add_argument("--no-normalize-adv", dest="normalize_adv",
                         action="store_false")
    p_train.add_argument("--print-config", action="store_true",
                         help="print the resolved config and exit")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=30)
    p_eval.add_argument("--safety-layer", choices=SAFETY_MODES)

    p_dyn = sub.add_parser("dyn-bench", help="dynamics-model comparison")
    common(p_dyn)
    p_dyn.add_argument("--epochs", type=int, default=30)
    p_dyn.add_argument("--batch", type=int, default=64)
    p_dyn.add_argument("--n-train", type=int, default=1720)
    p_dyn.add_argument("--n-test", type=int, default=492)
    p_dyn.add_argument("--horizon", type=int, default=10)

    p_col = sub.add_parser("collect", help="record a random-walk dataset")
    common(p_col)
    p_col.add_argument("--n-train", type=int, default=1720)
    p_col.add_argument("--n-test", type=int, default=492)
    p_col.add_argument("--dump-obs", type=int, default=0, metavar="N",
                       help="also write the first N observations as PGM")
    return parser


# CLI destinations that override top-level config fields directly.
_TOP_LEVEL = ("env", "level", "adv", "seed", "timeout", "out_dir",
              "step_budget", "normalize_adv")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults <- config file <- CLI flags, then validate."""
    merged = RunConfig().to_dict()
    if getattr(args, "config", None):
        _deep_update(merged, load_config_file(args.config))
    for name in _TOP_LEVEL:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    if getattr(args, "safety_layer", None) is not None:
        merged["safety"]["mode"] = args.safety_layer
    if getattr(args, "lagrange", None) is not None:
        merged["lagrange"]["enabled"] = args.lagrange
    return RunConfig.from_dict(merged).validate()


def _deep_update(base: dict, override: dict) -> None:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def run_name(cfg: RunConfig, prefix: str = "") -> str:
    parts = [cfg.env, cfg.level, cfg.adv, f"s{cfg.seed}"]
    if cfg.lagrange.enabled:
        parts.append("lag")
    if cfg.safety.mode != "off":
        parts.append(f"safe-{cfg.safety.mode}")
    name = "-".join(parts)
    return f"{prefix}{name}"


def _cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    run_dir = Path(cfg.out_dir) / run_name(cfg)
    manifest = train(cfg, run_dir)
    print(f"{len(manifest.rows)} iterations -> {run_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    from .experiments import load_trained_nets
    nets = load_trained_nets(cfg, ckpt.parent, checkpoint=ckpt.name)
    env = make_env(cfg.env, cfg.level, timeout=cfg.timeout, seed=cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    scfg = safety_config(cfg.safety, "infer")
    rows = evaluate(nets, env, args.episodes, rng, scfg)
    out_dir = Path(cfg.out_dir) / run_name(cfg, prefix="eval-")
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ("episode", "reward", "cost", "steps", "override_rate")
    write_metrics_csv(out_dir / "metrics.csv", rows, columns)
    stats = summarize(rows)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(stats, fh, indent=2)
        fh.write("\n")
    print(f"EpR {stats['reward_mean']:.2f} +- {stats['reward_std']:.2f}  "
          f"EpC {stats['cost_mean']:.2f} +- {stats['cost_std']:.2f}  "
          f"-> {out_dir}")
    return 0


def _cmd_dyn_bench(args) -> int:
    cfg = resolve_config(args)
    env = make_env(cfg.env, cfg.level, timeout=cfg.timeout, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 100)
    dataset = collect_dataset(env, rng, n_train=args.n_train,
                              n_test=args.n_test, level=cfg.level)
    out_dir = Path(cfg.out_dir) / f"dyn-{cfg.env}-{cfg.level}-s{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for kind in MODEL_KINDS:
        model = train_dyn(kind, dataset, epochs=args.epochs,
                          batch=args.batch, seed=cfg.seed)
        rows, skipped = rollout_eval(model, dataset, horizon=args.horizon)
        results[kind] = rows
        print(f"{kind}: step-1 IoU {rows[0]['iou_mean']:.4f}  "
              f"step-{args.horizon} IoU {rows[-1]['iou_mean']:.4f}  "
              f"({skipped} short episodes skipped)")
    write_dyn_metrics(out_dir / "dyn_metrics.csv", results)
    print(f"-> {out_dir / 'dyn_metrics.csv'}")
    return 0


def _cmd_collect(args) -> int:
    cfg = resolve_config(args)
    env = make_env(cfg.env, cfg.level, timeout=cfg.timeout, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 100)
    dataset = collect_dataset(env, rng, n_train=args.n_train,
                              n_test=args.n_test, level=cfg.level)
    out_dir = Path(cfg.out_dir) / f"data-{cfg.env}-{cfg.level}-s{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / "dataset.npz", obs=dataset.obs, actions=dataset.actions,
             next_obs=dataset.next_obs, episode_ids=dataset.episode_ids,
             n_train=dataset.n_train, branches=np.asarray(dataset.branches))
    for i in range(min(args.dump_obs, len(dataset))):
        write_pgm(out_dir / f"obs-{i:05d}.pgm", dataset.obs[i])
    print(f"{len(dataset)} transitions -> {out_dir}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "dyn-bench": _cmd_dyn_bench,
    "collect": _cmd_collect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainerError, CheckpointError, DatasetError, FileNotFoundError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
