"""Cached training runs and the comparison-study harnesses.

Training is the expensive step, so completed runs are keyed by a hash of
(resolved config, code version) and reused.  A key changes whenever either
changes, which is exactly when the cached result stops being trustworthy.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dynbench import (MODEL_KINDS, collect_dataset, known_cell_iou,
                       rollout_eval, train_dyn)
from .envs import make_env
from .nets import CadeNets, NetConfig
from .trainer import code_hash, evaluate, safety_config, summarize, train

__all__ = [
    "ESTIMATOR_SET",
    "STUDY_SEEDS",
    "run_key",
    "cached_train",
    "load_manifest",
    "final_window_mean",
    "load_trained_nets",
    "evaluate_checkpoint",
    "estimator_study_config",
    "safety_study_config",
    "estimator_comparison",
    "safety_comparison",
    "dynamics_study",
    "cached_dynamics_study",
]

# the published comparison grid: estimators under identical budgets/seeds
ESTIMATOR_SET = ("mgae", "td", "gae", "gae-rtg", "vtrace")
STUDY_SEEDS = (0, 1, 2)
STUDY_BUDGET = 150_000


def run_key(cfg: RunConfig) -> str:
    """Stable identity of a run: resolved config plus source hash."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True) + code_hash()
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def cached_train(cfg: RunConfig, cache_root) -> Path:
    """Train once per (config, code) pair; later calls reuse the directory."""
    run_dir = Path(cache_root) / run_key(cfg)
    done = run_dir / "manifest.json"
    final = run_dir / "ckpt-final.npz"
    if done.exists() and (final.exists() or cfg.step_budget == 0):
        return run_dir
    if run_dir.exists():
        shutil.rmtree(run_dir)  # partial leftovers from an aborted run
    train(cfg, run_dir)
    return run_dir


def load_manifest(run_dir) -> dict:
    with open(Path(run_dir) / "manifest.json") as fh:
        return json.load(fh)


def final_window_mean(rows: list[dict], key: str = "ep_reward",
                      fraction: float = 0.1) -> float:
    """Mean metric over the last ``fraction`` of iterations (at least one)."""
    if not rows:
        raise ValueError("run produced no iterations")
    n = max(1, round(fraction * len(rows)))
    return float(np.mean([row[key] for row in rows[-n:]]))


def load_trained_nets(cfg: RunConfig, run_dir,
                      checkpoint: str = "ckpt-final.npz") -> CadeNets:
    """Rebuild the network set and load a checkpoint from a run directory."""
    env = make_env(cfg.env, cfg.level, timeout=cfg.timeout)
    rng = np.random.default_rng(0)  # shapes only; the load overwrites values
    nets = CadeNets(NetConfig(int(np.prod(env.obs_shape)), tuple(env.branches),
                              cfg.hidden_dim, cfg.head_width), rng)
    nets.load(str(Path(run_dir) / checkpoint))
    return nets


def evaluate_checkpoint(cfg: RunConfig, run_dir, level: str, episodes: int,
                        eval_seed: int = 0, screened: bool = False) -> dict:
    """Evaluate a trained run on one difficulty level; returns the summary."""
    nets = load_trained_nets(cfg, run_dir)
    env = make_env(cfg.env, level, timeout=cfg.timeout, seed=eval_seed)
    rng = np.random.default_rng(np.random.SeedSequence(eval_seed).spawn(1)[0])
    scfg = safety_config(cfg.safety, "infer") if screened else None
    rows = evaluate(nets, env, episodes, rng, scfg)
    out = summarize(rows)
    out["level"] = level
    return out


def estimator_comparison(base: RunConfig, estimators, seeds, cache_root,
                         fraction: float = 0.1) -> dict[str, list[float]]:
    """Final-window mean episodic reward per estimator across seeds.

    The published comparison turns reward-advantage normalization off, so
    callers should pass a base config with ``normalize_adv=False``.
    """
    results: dict[str, list[float]] = {}
    for adv in estimators:
        finals = []
        for seed in seeds:
            cfg = replace(base, adv=adv, seed=seed)
            run_dir = cached_train(cfg, cache_root)
            rows = load_manifest(run_dir)["rows"]
            finals.append(final_window_mean(rows, fraction=fraction))
        results[adv] = finals
    return results


def safety_comparison(base: RunConfig, seeds, levels, episodes, cache_root,
                      eval_seed: int = 0) -> dict[str, dict[str, dict]]:
    """Constrained vs unconstrained training, evaluated across levels.

    Trains the base config twice per seed (with and without the Lagrangian
    term) and evaluates both on every level.  Returns
    {variant: {level: pooled summary}} with per-seed rows pooled together.
    """
    variants = {
        "lagrangian": replace(base, lagrange=replace(base.lagrange, enabled=True)),
        "plain": replace(base, lagrange=replace(base.lagrange, enabled=False)),
    }
    out: dict[str, dict[str, dict]] = {}
    for name, variant in variants.items():
        per_level: dict[str, dict] = {}
        for level in levels:
            pooled_r, pooled_c = [], []
            for seed in seeds:
                cfg = replace(variant, seed=seed)
                run_dir = cached_train(cfg, cache_root)
                summary = evaluate_checkpoint(cfg, run_dir, level, episodes,
                                              eval_seed + seed)
                pooled_r.append(summary["reward_mean"])
                pooled_c.append(summary["cost_mean"])
            per_level[level] = {
                "reward_mean": float(np.mean(pooled_r)),
                "cost_mean": float(np.mean(pooled_c)),
                "reward_per_seed": pooled_r,
                "cost_per_seed": pooled_c,
            }
        out[name] = per_level
    return out


def estimator_study_config(**overrides) -> RunConfig:
    """Base config for the advantage-estimator comparison.

    The comparison trains on raw (unnormalized) advantages with the cost
    constraint off, so differences between estimators are not flattened by
    per-episode rescaling.
    """
    base = dict(env="cliff-circular", level="medium", adv="mgae",
                step_budget=STUDY_BUDGET, normalize_adv=False)
    base.update(overrides)
    return RunConfig(**base).validate()


def safety_study_config(**overrides) -> RunConfig:
    """Base config for the constrained-vs-unconstrained comparison.

    Trains on the medium level only; evaluation sweeps all levels.
    ``safety_comparison`` toggles the Lagrangian term itself.
    """
    base = dict(env="cliff-circular", level="medium", adv="mgae",
                step_budget=STUDY_BUDGET, normalize_adv=True)
    base.update(overrides)
    return RunConfig(**base).validate()


def dynamics_study(env_name: str, level: str = "medium", n_train: int = 1720,
                   n_test: int = 492, epochs: int = 30, batch: int = 64,
                   horizon: int = 10, seed: int = 0,
                   timeout: int = 500) -> dict:
    """Train every one-step model kind on one dataset and score rollouts.

    Returns per-kind recursive-rollout curves, skipped-episode counts, the
    warp model's known-cell 1-step IoU, and the summed fit time in seconds.
    """
    env = make_env(env_name, level, timeout=timeout, seed=seed)
    rng = np.random.default_rng(seed + 100)
    dataset = collect_dataset(env, rng, n_train=n_train, n_test=n_test,
                              level=level)
    out = {"rows": {}, "skipped": {}, "known_iou": {}, "train_seconds": 0.0}
    for kind in MODEL_KINDS:
        t0 = time.perf_counter()
        model = train_dyn(kind, dataset, epochs=epochs, batch=batch, seed=seed)
        out["train_seconds"] += time.perf_counter() - t0
        rows, skipped = rollout_eval(model, dataset, horizon=horizon)
        out["rows"][kind] = rows
        out["skipped"][kind] = skipped
        if kind == "sdm":
            out["known_iou"][kind] = known_cell_iou(model, dataset)
    return out


def cached_dynamics_study(cache_root, **params) -> dict:
    """Disk-cached ``dynamics_study``; the key tracks params and code."""
    blob = json.dumps(params, sort_keys=True) + code_hash()
    key = hashlib.sha1(blob.encode()).hexdigest()[:16]
    path = Path(cache_root) / f"dyn-{key}.json"
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    path.parent.mkdir(parents=True, exist_ok=True)
    result = dynamics_study(**params)
    with open(path, "w") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    return result
