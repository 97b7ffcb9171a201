"""End-to-end constrained training loop.

One iteration collects ``episodes_per_iter`` episodes with the current
policy and then updates once, in a fixed order: Lagrange multiplier,
dynamics model, cost estimator, reward advantage, cost advantage, reward
estimator, actor plus trunk.  Batching episodes averages the policy
gradient over more trajectories per step of the trust region.  Buffers are
replayed in recorded order, never shuffled, so the recurrent state seen at
update time matches the one seen at collection time bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .advantage import (ReturnWindow, discounted_returns, gae, mgae,
                        normalize, reinforce_baseline, td, vtrace)
from .autograd import Tape, concat
from .config import RunConfig
from .envs import make_env
from .focops import (LagrangeState, TrustRegionConfig, categorical_kl,
                     cost_advantage, kl_early_stop, lagrange_update,
                     policy_loss)
from .homography import jaccard_loss, solve_homography, warp
from .nets import (Adam, CadeNets, NetConfig, action_onehot, cade_forward,
                   gru_step_np, mlp_np, mlp_taped, trunk_replay_taped)
from .safety import SafetyConfig, evaluate_with_overlay, screen_action

__all__ = [
    "TrainerError",
    "EpisodeBuffer",
    "RunManifest",
    "METRIC_COLUMNS",
    "STAGES",
    "code_hash",
    "seed_streams",
    "safety_config",
    "collect_episode",
    "train",
    "evaluate",
    "summarize",
    "write_metrics_csv",
]

METRIC_COLUMNS = ("iteration", "ep_reward", "ep_cost", "beta", "kl",
                  "loss_pi", "loss_r", "loss_c", "loss_sdm", "override_rate")

STAGES = ("collect", "lagrange", "sdm", "cost_estimator", "reward_advantage",
          "cost_advantage", "reward_estimator", "actor")


class TrainerError(RuntimeError):
    """Aborted run: non-finite loss or broken run directory."""


@dataclass
class EpisodeBuffer:
    """One recorded episode, aligned per step."""

    obs: np.ndarray           # (T, r, c) observation consumed at each step
    next_obs: np.ndarray      # (T, r, c)
    actions: np.ndarray       # (T, B) executed actions
    prev_onehots: np.ndarray  # (T, act_dim) trunk input at each step
    onehots: np.ndarray       # (T, act_dim) executed-action one-hots
    logits: np.ndarray        # (T, act_dim) behavior logits
    log_probs: np.ndarray     # (T,) behavior log-probs of executed actions
    hiddens: np.ndarray       # (T, nh, 1) trunk state after consuming obs_t
    rewards: np.ndarray       # (T,)
    est_rewards: np.ndarray   # (T,) reward-head output recorded at rollout
    costs: np.ndarray         # (T,)
    kind: str                 # terminal kind that ended the episode
    fired: int                # screening overrides during collection

    def __len__(self):
        return self.obs.shape[0]


@dataclass
class RunManifest:
    """Append-only run record; rows mirror metrics.csv."""

    config: dict
    seed: int
    code_hash: str
    rows: list = field(default_factory=list)
    started: str = ""
    finished: str = ""

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2)
            fh.write("\n")


def code_hash() -> str:
    """Content hash of the package sources, for manifest provenance."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def seed_streams(seed: int) -> dict:
    """Fan one seed out to independent per-component streams.

    Keeping the streams separate means toggling the safety layer (or the
    cost-advantage horizon) never perturbs env or policy randomness.
    """
    init_ss, env_ss, policy_ss, safety_ss, imagine_ss = \
        np.random.SeedSequence(seed).spawn(5)
    return {
        "init": np.random.default_rng(init_ss),
        "env_seed": int(env_ss.generate_state(1)[0]),
        "policy": np.random.default_rng(policy_ss),
        "safety": np.random.default_rng(safety_ss),
        "imagine": np.random.default_rng(imagine_ss),
    }


def safety_config(section, phase: str) -> SafetyConfig:
    """Screen settings for one phase; ``phase`` is "train" or "infer"."""
    return SafetyConfig(
        samples=section.samples,
        horizon=section.horizon,
        threshold=section.threshold,
        activation_fraction=section.activation_fraction,
        enabled=section.mode in (phase, "both"),
    )


def _env_action(action: np.ndarray):
    return int(action[0]) if action.size == 1 else action


def collect_episode(nets: CadeNets, env, policy_rng: np.random.Generator,
                    safety_rng: np.random.Generator, scfg: SafetyConfig,
                    progress: float = 1.0) -> EpisodeBuffer:
    """Roll one episode; the screen (when active) filters proposed actions."""
    branches = nets.cfg.branches
    obs = env.reset()
    hidden = nets.initial_hidden()
    prev = None
    cols = {k: [] for k in ("obs", "next_obs", "actions", "prev_onehots",
                            "onehots", "logits", "log_probs", "hiddens",
                            "rewards", "est_rewards", "costs")}
    fired = 0
    while True:
        prev_oh = action_onehot(branches, prev)
        bundle = cade_forward(nets, obs, prev, hidden, policy_rng)
        decision = screen_action(nets, obs, bundle.hidden, bundle.action,
                                 bundle.log_prob, safety_rng, scfg, progress)
        action = np.asarray(decision.action)
        onehot = action_onehot(branches, action)
        if np.array_equal(action, bundle.action):
            r_hat = bundle.r_hat
        else:
            # the estimate must track the executed action, not the proposal
            r_hat = nets.reward_np(bundle.hidden, onehot)
        res = env.step(_env_action(action))
        cols["obs"].append(np.asarray(obs, dtype=np.float64))
        cols["next_obs"].append(np.asarray(res.obs, dtype=np.float64))
        cols["actions"].append(action)
        cols["prev_onehots"].append(prev_oh[0])
        cols["onehots"].append(onehot[0])
        cols["logits"].append(bundle.logits)
        cols["log_probs"].append(decision.log_prob)
        cols["hiddens"].append(bundle.hidden)
        cols["rewards"].append(res.reward)
        cols["est_rewards"].append(r_hat)
        cols["costs"].append(res.cost)
        fired += int(decision.fired)
        hidden = bundle.hidden
        prev = action
        obs = res.obs
        if res.terminal:
            return EpisodeBuffer(
                obs=np.asarray(cols["obs"]),
                next_obs=np.asarray(cols["next_obs"]),
                actions=np.asarray(cols["actions"], dtype=np.int64),
                prev_onehots=np.asarray(cols["prev_onehots"]),
                onehots=np.asarray(cols["onehots"]),
                logits=np.asarray(cols["logits"]),
                log_probs=np.asarray(cols["log_probs"]),
                hiddens=np.asarray(cols["hiddens"]),
                rewards=np.asarray(cols["rewards"]),
                est_rewards=np.asarray(cols["est_rewards"]),
                costs=np.asarray(cols["costs"]),
                kind=res.kind,
                fired=fired,
            )


# ---------------------------------------------------------------------------
# update stages; each runs once per iteration over the collected batch


def _mse_taped(pred, target: np.ndarray):
    d = pred - pred.tape.const(target)
    return (d * d).mean()


def _sdm_update(nets: CadeNets, bufs: list[EpisodeBuffer], opt: Adam) -> float:
    obs = np.concatenate([b.obs for b in bufs])
    next_obs = np.concatenate([b.next_obs for b in bufs])
    onehots = np.concatenate([b.onehots for b in bufs])
    r, c = obs.shape[1:]
    tape = Tape()
    leaves = nets.bind(tape, "sdm")
    x = tape.const(np.concatenate([obs.reshape(len(obs), -1), onehots], axis=1))
    offsets = mlp_taped(leaves, x).reshape((len(obs), 4, 2))
    H = solve_homography(offsets, r, c)
    pred = warp(tape.const(obs), H)
    loss = jaccard_loss(pred, tape.const(next_obs))
    tape.backward(loss)
    opt.step({k: t.grad for k, t in leaves.items()})
    return float(loss.values)


def _cost_update(nets: CadeNets, bufs: list[EpisodeBuffer], opt: Adam) -> float:
    # the estimator prices arriving at a state: pairs are (o_{t+1}, c_t)
    next_obs = np.concatenate([b.next_obs for b in bufs])
    costs = np.concatenate([b.costs for b in bufs])
    tape = Tape()
    leaves = nets.bind(tape, "cost")
    x = tape.const(next_obs.reshape(len(next_obs), -1))
    pred = mlp_taped(leaves, x, out_act="sigmoid")
    loss = _mse_taped(pred, costs[:, None])
    tape.backward(loss)
    opt.step({k: t.grad for k, t in leaves.items()})
    return float(loss.values)


def _state_values(nets: CadeNets, buf: EpisodeBuffer) -> np.ndarray:
    """Critic read-out: the reward head on (hidden, zero action)."""
    T = len(buf)
    x = np.concatenate([buf.hiddens[:, :, 0],
                        np.zeros((T, nets.cfg.act_dim))], axis=1)
    return mlp_np(nets.params["reward"], x)[:, 0]


def _reward_advantage(nets: CadeNets, buf: EpisodeBuffer, cfg: RunConfig,
                      window: ReturnWindow):
    """Per-step advantages plus the reward-head regression target.

    The head is still pre-update here: critic values and recorded estimates
    are the collection-time numbers, matching the update ordering.
    """
    r = buf.rewards
    if cfg.adv == "mgae":
        adv = mgae(r, buf.est_rewards, window.mean(), cfg.mgae_mode)
        targets = r.copy()
    else:
        values = np.append(_state_values(nets, buf), 0.0)
        if cfg.adv == "td":
            adv = td(r, values, cfg.gamma)
            targets = r + cfg.gamma * values[1:]
        elif cfg.adv == "gae":
            adv = gae(r, values, cfg.gamma, cfg.lam)
            targets = r + cfg.gamma * values[1:]
        elif cfg.adv == "gae-rtg":
            adv = gae(r, values, cfg.gamma, cfg.lam)
            targets = discounted_returns(r, cfg.gamma)
        elif cfg.adv == "reinforce":
            adv = reinforce_baseline(r, values, cfg.gamma)
            targets = discounted_returns(r, cfg.gamma)
        elif cfg.adv == "vtrace":
            adv, vs = vtrace(r, values, cfg.gamma, buf.log_probs,
                             buf.log_probs, cfg.vtrace_clip,
                             return_targets=True)
            targets = vs[:-1]
        else:
            raise TrainerError(f"unknown advantage estimator {cfg.adv!r}")
    window.push(float(r.sum()))
    return adv, targets


def _reward_update(nets: CadeNets, bufs: list[EpisodeBuffer],
                   targets: np.ndarray, critic: bool, opt: Adam) -> float:
    """Regress the reward head; hidden states enter as constants so this
    loss can never reach the trunk."""
    hiddens = np.concatenate([b.hiddens[:, :, 0] for b in bufs])
    if critic:
        act = np.zeros((len(hiddens), nets.cfg.act_dim))
    else:
        act = np.concatenate([b.onehots for b in bufs])
    tape = Tape()
    leaves = nets.bind(tape, "reward")
    x = tape.const(np.concatenate([hiddens, act], axis=1))
    pred = mlp_taped(leaves, x)
    loss = _mse_taped(pred, np.asarray(targets, dtype=np.float64)[:, None])
    tape.backward(loss)
    opt.step({k: t.grad for k, t in leaves.items()})
    return float(loss.values)


def _replay_logits_np(nets: CadeNets, x_rows: np.ndarray) -> np.ndarray:
    """Value-level trunk+actor replay from a zero state; (T, in) -> (T, A)."""
    h = nets.initial_hidden()
    out = np.empty((x_rows.shape[0], nets.cfg.act_dim))
    for t in range(x_rows.shape[0]):
        h = gru_step_np(nets.params["trunk"], x_rows[t][:, None], h)
        out[t] = nets.actor_logits_np(h)
    return out


def _actor_update(nets: CadeNets, bufs: list[EpisodeBuffer], a_r: np.ndarray,
                  a_c: np.ndarray | None, beta: float,
                  trust: TrustRegionConfig, opts: dict, epochs: int):
    """Policy loss through full taped trunk replays; stops on KL breach.

    Each episode replays from a fresh initial state; the loss averages over
    every step in the batch. Returns the last applied loss and the
    post-update batch KL against the collection-time policy.
    """
    branches = nets.cfg.branches
    x_seqs = [np.concatenate([b.obs.reshape(len(b), -1), b.prev_onehots],
                             axis=1) for b in bufs]
    behavior_logits = np.concatenate([b.logits for b in bufs])
    actions = np.concatenate([b.actions for b in bufs])
    behavior_lps = np.concatenate([b.log_probs for b in bufs])
    loss_value = kl_value = 0.0
    for _ in range(epochs):
        tape = Tape()
        trunk_leaves = nets.bind(tape, "trunk")
        actor_leaves = nets.bind(tape, "actor")
        hs = concat([trunk_replay_taped(trunk_leaves, tape, x) for x in x_seqs])
        logits = mlp_taped(actor_leaves, hs)
        loss, _ = policy_loss(logits, behavior_logits, branches, actions,
                              behavior_lps, a_r, a_c, beta, trust)
        loss_value = float(loss.values)
        if not math.isfinite(loss_value):
            return loss_value, kl_value
        tape.backward(loss)
        opts["trunk"].step({k: t.grad for k, t in trunk_leaves.items()})
        opts["actor"].step({k: t.grad for k, t in actor_leaves.items()})
        fresh = np.concatenate([_replay_logits_np(nets, x) for x in x_seqs])
        kl_value = float(categorical_kl(fresh, behavior_logits,
                                        branches).mean())
        if kl_early_stop(kl_value, trust.kl_stop):
            break
    return loss_value, kl_value


# ---------------------------------------------------------------------------
# the training loop


def write_metrics_csv(path, rows, columns=METRIC_COLUMNS) -> None:
    """Full rewrite with repr floats; reruns must be byte-identical."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _cell(value):
    return repr(float(value)) if isinstance(value, float) else value


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def train(cfg: RunConfig, run_dir, instrument=None) -> RunManifest:
    """Run one seed to its step budget; artifacts land under ``run_dir``.

    ``instrument`` (optional) is called with each stage name as it runs,
    in execution order; tests use it to pin the update ordering.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    note = instrument if instrument is not None else (lambda stage: None)

    streams = seed_streams(cfg.seed)
    env = make_env(cfg.env, cfg.level, timeout=cfg.timeout,
                   seed=streams["env_seed"])
    obs_dim = int(np.prod(env.obs_shape))
    nets = CadeNets(NetConfig(obs_dim, tuple(env.branches), cfg.hidden_dim,
                              cfg.head_width), streams["init"])
    opts = {head: Adam(nets.params[head], lr=cfg.lr) for head in CadeNets.HEADS}
    lag = LagrangeState(0.0, cfg.lagrange.lr, cfg.lagrange.budget,
                        cfg.lagrange.beta_max)
    trust = TrustRegionConfig(cfg.trust.kl_mask, cfg.trust.kl_stop,
                              cfg.trust.surrogate_coef)
    window = ReturnWindow(cfg.window)
    scfg = safety_config(cfg.safety, "train")

    manifest = RunManifest(config=cfg.to_dict(), seed=cfg.seed,
                           code_hash=code_hash(), started=_now())
    nets.save(run_dir / "ckpt-init.npz")

    def abort(stage: str, iteration: int, value: float):
        nets.save(run_dir / "diagnostic.npz")
        write_metrics_csv(run_dir / "metrics.csv", manifest.rows)
        manifest.finished = _now()
        manifest.save(run_dir / "manifest.json")
        raise TrainerError(f"non-finite {stage} loss ({value!r}) at iteration "
                           f"{iteration}; diagnostic snapshot saved")

    total = 0
    it = 0
    while total < cfg.step_budget:
        it += 1
        bufs = []
        fired = steps = 0
        for _ in range(cfg.episodes_per_iter):
            progress = total / cfg.step_budget
            note("collect")
            buf = collect_episode(nets, env, streams["policy"],
                                  streams["safety"], scfg, progress)
            total += len(buf)
            steps += len(buf)
            fired += buf.fired
            bufs.append(buf)
        ep_rewards = [float(b.rewards.sum()) for b in bufs]
        ep_costs = [float(b.costs.sum()) for b in bufs]

        if cfg.lagrange.enabled:
            note("lagrange")
            lag = lagrange_update(lag, float(np.mean(ep_costs)))

        note("sdm")
        loss_sdm = _sdm_update(nets, bufs, opts["sdm"])
        if not math.isfinite(loss_sdm):
            abort("sdm", it, loss_sdm)

        note("cost_estimator")
        loss_c = _cost_update(nets, bufs, opts["cost"])
        if not math.isfinite(loss_c):
            abort("cost_estimator", it, loss_c)

        # advantages are per episode (the window advances in collection
        # order); normalization, when on, runs over the pooled batch
        note("reward_advantage")
        adv_parts, target_parts = [], []
        for buf in bufs:
            adv, targets = _reward_advantage(nets, buf, cfg, window)
            adv_parts.append(adv)
            target_parts.append(targets)
        a_r = np.concatenate(adv_parts)
        targets = np.concatenate(target_parts)
        if cfg.normalize_adv:
            a_r = normalize(a_r)

        a_c = None
        if cfg.lagrange.enabled:
            note("cost_advantage")
            a_c = np.concatenate([
                cost_advantage(nets, buf.obs, buf.actions, buf.hiddens,
                               streams["imagine"],
                               horizon=cfg.cost_adv.horizon,
                               gamma=cfg.gamma, k=cfg.cost_adv.k,
                               c_b=cfg.cost_adv.c_b)
                for buf in bufs])

        note("reward_estimator")
        loss_r = _reward_update(nets, bufs, targets,
                                critic=cfg.adv != "mgae",
                                opt=opts["reward"])
        if not math.isfinite(loss_r):
            abort("reward_estimator", it, loss_r)

        note("actor")
        loss_pi, kl_value = _actor_update(nets, bufs, a_r, a_c, lag.beta,
                                          trust, opts, cfg.actor_epochs)
        if not math.isfinite(loss_pi):
            abort("actor", it, loss_pi)

        manifest.rows.append({
            "iteration": it,
            "ep_reward": float(np.mean(ep_rewards)),
            "ep_cost": float(np.mean(ep_costs)),
            "beta": float(lag.beta),
            "kl": float(kl_value),
            "loss_pi": float(loss_pi),
            "loss_r": float(loss_r),
            "loss_c": float(loss_c),
            "loss_sdm": float(loss_sdm),
            "override_rate": fired / steps,
        })
        if it % cfg.checkpoint_every == 0:
            nets.save(run_dir / f"ckpt-{it:06d}.npz")

    if it > 0:
        nets.save(run_dir / "ckpt-final.npz")
    write_metrics_csv(run_dir / "metrics.csv", manifest.rows)
    manifest.finished = _now()
    manifest.save(run_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# evaluation


def evaluate(nets: CadeNets, env, episodes: int, rng: np.random.Generator,
             scfg: SafetyConfig | None = None, progress: float = 1.0) -> list[dict]:
    """Per-episode reward/cost rows; the screen runs only when enabled."""
    if scfg is None:
        scfg = SafetyConfig(enabled=False)
    return evaluate_with_overlay(nets, env, episodes, rng, scfg, progress)


def summarize(rows: list[dict]) -> dict:
    """Mean and population std of episodic reward and cost, plus overrides."""
    r = np.asarray([row["reward"] for row in rows], dtype=np.float64)
    c = np.asarray([row["cost"] for row in rows], dtype=np.float64)
    o = np.asarray([row["override_rate"] for row in rows], dtype=np.float64)
    return {
        "episodes": len(rows),
        "reward_mean": float(r.mean()), "reward_std": float(r.std()),
        "cost_mean": float(c.mean()), "cost_std": float(c.std()),
        "override_rate_mean": float(o.mean()),
    }
