"""Reward advantage estimators over completed episode trajectories.

All estimators take plain numpy reward/value arrays and return one
advantage per step; none of them build autodiff graphs (advantages enter
the policy loss as constants).

Conventions: for an episode of T steps, ``values`` has length T + 1 with
``values[T]`` the bootstrap (0 at terminal, including timeouts).  The
marginal-gain estimator (``mgae``) is undiscounted and uses a sliding
window of completed episodic returns as its baseline; with an empty window
the baseline is 0.
"""

from __future__ import annotations

from collections import deque

import numpy as np

__all__ = [
    "ReturnWindow",
    "mgae",
    "td",
    "gae",
    "reinforce_baseline",
    "vtrace",
    "normalize",
]


class ReturnWindow:
    """Ring buffer of the last ``size`` completed episodic returns.

    Timeout-truncated episodes contribute their partial return; in-progress
    episodes are never pushed.
    """

    def __init__(self, size: int = 10):
        if size < 1:
            raise ValueError("window size must be positive")
        self.size = size
        self._returns: deque = deque(maxlen=size)

    def push(self, episodic_return: float) -> None:
        self._returns.append(float(episodic_return))

    def mean(self) -> float:
        if not self._returns:
            return 0.0
        return float(np.mean(self._returns))

    def __len__(self) -> int:
        return len(self._returns)


def mgae(rewards: np.ndarray, est_rewards: np.ndarray, baseline: float,
         mode: str = "inclusive") -> np.ndarray:
    """Marginal-gain advantages: remaining true reward plus accumulated
    estimated reward, relative to the windowed return baseline.

    A_j = sum_{k=j}^{T-1} r_k + sum_{i=0}^{j} rhat_i - baseline

    ``mode`` controls the boundary step: "inclusive" counts index j in both
    sums (the literal reading), "exclusive" sums rhat over i < j so a
    perfect estimator reconstructs the episode return exactly at every j.
    """
    r = np.asarray(rewards, dtype=np.float64)
    rhat = np.asarray(est_rewards, dtype=np.float64)
    if r.shape != rhat.shape:
        raise ValueError("rewards and estimated rewards must align")
    if r.size == 0:
        return np.empty(0)
    suffix = np.cumsum(r[::-1])[::-1]          # sum_{k>=j} r_k
    prefix = np.cumsum(rhat)                   # sum_{i<=j} rhat_i
    if mode == "exclusive":
        prefix = prefix - rhat
    elif mode != "inclusive":
        raise ValueError(f"unknown mgae mode {mode!r}")
    return suffix + prefix - baseline


def td(rewards: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    """One-step temporal-difference errors r_t + gamma V_{t+1} - V_t."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values must include the bootstrap entry")
    return r + gamma * v[1:] - v[:-1]


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float,
        lam: float = 0.95) -> np.ndarray:
    """Generalized advantage estimation; lam = 0 degrades to td() bit for bit."""
    deltas = td(rewards, values, gamma)
    if lam == 0.0:
        return deltas
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Reward-to-go G_t = sum_{k>=t} gamma^{k-t} r_k."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def reinforce_baseline(rewards: np.ndarray, values: np.ndarray,
                       gamma: float) -> np.ndarray:
    """Monte-Carlo return-to-go minus the learned state-value baseline."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values must include the bootstrap entry")
    return discounted_returns(r, gamma) - v[:-1]


def vtrace(rewards: np.ndarray, values: np.ndarray, gamma: float,
           behavior_logp: np.ndarray, target_logp: np.ndarray,
           clip: float = 1.0, return_targets: bool = False):
    """Off-policy-corrected advantages with clipped importance weights.

    rho_t = min(clip, pi(a_t|s_t) / mu(a_t|s_t)) weights both the one-step
    errors and the backward trace; advantages are
    rho_t (r_t + gamma vs_{t+1} - V_t) with vs the corrected value targets.
    On-policy (pi = mu) with clip >= 1 every weight is 1.

    With ``return_targets`` also returns vs (the critic regression target).
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1:
        raise ValueError("values must include the bootstrap entry")
    rho = np.minimum(clip, np.exp(np.asarray(target_logp) - np.asarray(behavior_logp)))
    deltas = rho * (r + gamma * v[1:] - v[:-1])
    T = len(r)
    vs = np.empty(T + 1)
    vs[T] = v[T]
    for t in range(T - 1, -1, -1):
        vs[t] = v[t] + deltas[t] + gamma * rho[t] * (vs[t + 1] - v[t + 1])
    adv = rho * (r + gamma * vs[1:] - v[:-1])
    if return_targets:
        return adv, vs
    return adv


def normalize(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean unit-variance rescaling (population std).

    Arrays with fewer than two entries are returned unchanged; constant
    arrays map to zeros through the eps guard.
    """
    a = np.asarray(adv, dtype=np.float64)
    if a.size < 2:
        return a.copy()
    return (a - a.mean()) / (a.std() + eps)
