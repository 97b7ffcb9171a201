"""Execution-time action screening through imagined rollouts.

The screen prices the policy's proposed action by rolling the learned
dynamics and cost estimator forward a short horizon.  Only when every
sampled continuation of the proposed action meets the cost threshold does
it intervene, swapping in the cheapest candidate first action.  Usable
during training (gated to the later part of the run) and at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .homography import sdm_predict
from .nets import CadeNets, action_onehot, cade_forward, sample_action

__all__ = [
    "SafetyConfig",
    "ScreenDecision",
    "screen_action",
    "evaluate_with_overlay",
]


@dataclass(frozen=True)
class SafetyConfig:
    """Screening knobs: sample count, rollout depth, trigger level, gating."""

    samples: int = 10
    horizon: int = 1
    threshold: float = 1.0
    activation_fraction: float = 1.0 / 3.0
    enabled: bool = False

    def __post_init__(self):
        if self.samples < 1 or self.horizon < 1:
            raise ValueError("samples and horizon must be >= 1")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if not 0.0 <= self.activation_fraction <= 1.0:
            raise ValueError("activation fraction must be in [0, 1]")


@dataclass(frozen=True)
class ScreenDecision:
    """Outcome of one screening call; costs are None when the screen slept."""

    action: np.ndarray
    log_prob: float
    fired: bool
    proposed_cost: float | None
    chosen_cost: float | None


def _imagined_cost(nets, grid: np.ndarray, hidden: np.ndarray, first,
                   rng: np.random.Generator, horizon: int, gamma: float) -> float:
    """Discounted predicted cost of one imagined trajectory from ``first``."""
    total, cur, h = 0.0, grid, hidden
    a = np.asarray(first)
    for step in range(horizon):
        onehot = action_onehot(nets.cfg.branches, a)
        cur = sdm_predict(nets.sdm_offsets_flat, cur, onehot[0])
        total += gamma ** step * float(nets.cost_np(cur.reshape(1, -1))[0])
        if step + 1 < horizon:
            h = nets.trunk_step_np(cur.reshape(1, -1), onehot, h)
            a, _ = sample_action(nets.actor_logits_np(h), nets.cfg.branches, rng)
    return total


def screen_action(nets: CadeNets, obs_grid: np.ndarray, hidden: np.ndarray,
                  proposed: np.ndarray, proposed_log_prob: float,
                  rng: np.random.Generator, cfg: SafetyConfig,
                  progress: float = 1.0, gamma: float = 0.99) -> ScreenDecision:
    """Screen one proposed action against the imagined cost threshold.

    Fires only when all ``cfg.samples`` rollouts that start with the
    proposed action cost at least ``cfg.threshold``.  The replacement is
    the cheapest first action among policy-sampled candidates, with the
    proposed action kept in the pool (and winning ties), so the chosen
    imagined cost never exceeds the proposed one.  Before the activation
    point, or when disabled, the proposal passes through untouched.
    """
    proposed = np.asarray(proposed)
    if not cfg.enabled or progress < cfg.activation_fraction:
        return ScreenDecision(proposed, proposed_log_prob, False, None, None)
    grid = np.asarray(obs_grid, dtype=np.float64)
    prop_costs = [_imagined_cost(nets, grid, hidden, proposed, rng,
                                 cfg.horizon, gamma)
                  for _ in range(cfg.samples)]
    best_prop = min(prop_costs)
    if not all(c >= cfg.threshold for c in prop_costs):
        return ScreenDecision(proposed, proposed_log_prob, False,
                              best_prop, best_prop)
    logits = nets.actor_logits_np(hidden)
    pool = [(best_prop, 0, proposed, proposed_log_prob)]
    for i in range(cfg.samples):
        alt, lp = sample_action(logits, nets.cfg.branches, rng)
        cost = _imagined_cost(nets, grid, hidden, alt, rng, cfg.horizon, gamma)
        pool.append((cost, i + 1, alt, lp))
    cost, _, action, log_prob = min(pool, key=lambda entry: (entry[0], entry[1]))
    return ScreenDecision(action, log_prob, True, best_prop, cost)


def _env_action(action: np.ndarray):
    return int(action[0]) if action.size == 1 else action


def evaluate_with_overlay(nets: CadeNets, env, episodes: int,
                          rng: np.random.Generator, cfg: SafetyConfig,
                          progress: float = 1.0) -> list[dict]:
    """Stochastic evaluation episodes with the screen in the loop.

    Returns one row per episode: reward, cost, length, and the fraction of
    steps on which the screen fired.  With the screen disabled the rows
    coincide with an unscreened evaluation under the same rng stream.
    """
    rows = []
    for ep in range(episodes):
        obs = env.reset()
        hidden = nets.initial_hidden()
        prev = None
        ep_reward = ep_cost = 0.0
        fired = steps = 0
        while True:
            bundle = cade_forward(nets, obs, prev, hidden, rng)
            decision = screen_action(nets, obs, bundle.hidden, bundle.action,
                                     bundle.log_prob, rng, cfg, progress)
            res = env.step(_env_action(decision.action))
            ep_reward += res.reward
            ep_cost += res.cost
            fired += int(decision.fired)
            steps += 1
            hidden = bundle.hidden
            prev = decision.action
            obs = res.obs
            if res.terminal:
                break
        rows.append({"episode": ep, "reward": ep_reward, "cost": ep_cost,
                     "steps": steps, "override_rate": fired / steps})
    return rows
