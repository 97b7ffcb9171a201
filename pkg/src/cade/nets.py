"""Trainable modules: recurrent trunk, actor and estimator heads, dynamics
offsets net, cost net, and the Adam optimizer.

Five parameter groups live in one :class:`CadeNets` container under the
stable names ``trunk``, ``actor``, ``reward``, ``cost``, ``sdm`` (also the
checkpoint key prefixes).  Every network has two forward paths sharing the
same parameter arrays:

  * a value-level numpy path for environment rollouts (no tape, fast);
  * a taped path for training, built from autograd ops.

Per-step recurrent state is a column vector ``(hidden, 1)``; batched head
activations are row-major ``(T, features)``.  The per-step taped GRU and its
numpy twin perform identical numpy calls in identical order, so rollout and
replay hidden states agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autograd import Tape, Tensor, concat, stable_sigmoid

__all__ = [
    "NetConfig",
    "CadeNets",
    "ValueBundle",
    "Adam",
    "cade_forward",
    "sample_action",
    "action_onehot",
    "onehot_rows",
    "semi_orthogonal",
    "mlp_params",
    "mlp_np",
    "mlp_taped",
    "gru_params",
    "gru_step_np",
    "gru_step_taped",
    "log_softmax_np",
    "log_softmax_taped",
    "taken_log_prob",
    "trunk_replay_taped",
    "global_norm",
]


# ---------------------------------------------------------------------------
# initialization

def semi_orthogonal(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """(out, in) matrix with orthonormal rows or columns, entries ~ 1/sqrt(in).

    QR of a Gaussian orthonormalizes the smaller dimension; the tall case is
    rescaled so entry magnitude matches the 1/sqrt(fan-in) convention.
    """
    a = rng.standard_normal((max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(a)
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0  # QR sign ambiguity
    q = q * s
    if out_dim < in_dim:
        q = q.T
    return q * np.sqrt(max(out_dim, in_dim) / in_dim)


def mlp_params(rng: np.random.Generator, sizes: tuple[int, ...]) -> dict[str, np.ndarray]:
    """Linear stack in row convention: weights (in, out), zero biases (1, out)."""
    p: dict[str, np.ndarray] = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"w{i}"] = np.ascontiguousarray(semi_orthogonal(rng, n_out, n_in).T)
        p[f"b{i}"] = np.zeros((1, n_out))
    return p


def gru_params(rng: np.random.Generator, in_dim: int, hidden_dim: int) -> dict[str, np.ndarray]:
    """Fused gate matrices, gate order (reset, update, candidate)."""
    return {
        "W": np.vstack([semi_orthogonal(rng, hidden_dim, in_dim) for _ in range(3)]),
        "U": np.vstack([semi_orthogonal(rng, hidden_dim, hidden_dim) for _ in range(3)]),
        "b": np.zeros((3 * hidden_dim, 1)),
    }


# ---------------------------------------------------------------------------
# forward passes

def mlp_np(p: dict[str, np.ndarray], x: np.ndarray, out_act: str | None = None) -> np.ndarray:
    """Rows (B, in) -> (B, out); tanh hidden layers, optional output activation."""
    n = len(p) // 2
    for i in range(n):
        x = x @ p[f"w{i}"] + p[f"b{i}"]
        if i < n - 1:
            x = np.tanh(x)
        elif out_act == "tanh":
            x = np.tanh(x)
        elif out_act == "sigmoid":
            x = stable_sigmoid(x)
    return x


def mlp_taped(p: dict[str, Tensor], x: Tensor, out_act: str | None = None) -> Tensor:
    n = len(p) // 2
    for i in range(n):
        x = x @ p[f"w{i}"] + p[f"b{i}"]
        if i < n - 1:
            x = x.tanh()
        elif out_act == "tanh":
            x = x.tanh()
        elif out_act == "sigmoid":
            x = x.sigmoid()
    return x


def gru_step_np(p: dict[str, np.ndarray], x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """One cell update on columns: x (in, 1), h (H, 1) -> (H, 1).

    r = sig(W_r x + b_r + U_r h), z likewise, n = tanh(W_n x + b_n + r*(U_n h)),
    h' = (1 - z)*n + z*h.  The tanh candidate keeps h' inside (-1, 1) except
    when it saturates to exactly +-1.0 in float64.
    """
    nh = h.shape[0]
    gx = p["W"] @ x + p["b"]
    gh = p["U"] @ h
    r = stable_sigmoid(gx[:nh] + gh[:nh])
    z = stable_sigmoid(gx[nh:2 * nh] + gh[nh:2 * nh])
    n = np.tanh(gx[2 * nh:] + r * gh[2 * nh:])
    return (1.0 - z) * n + z * h


def gru_step_taped(p: dict[str, Tensor], x: Tensor, h: Tensor) -> Tensor:
    """Taped twin of :func:`gru_step_np`; same ops in the same order."""
    nh = h.shape[0]
    gx = p["W"] @ x + p["b"]
    gh = p["U"] @ h
    r = (gx[:nh] + gh[:nh]).sigmoid()
    z = (gx[nh:2 * nh] + gh[nh:2 * nh]).sigmoid()
    n = (gx[2 * nh:] + r * gh[2 * nh:]).tanh()
    return (1.0 - z) * n + z * h


def trunk_replay_taped(p: dict[str, Tensor], tape: Tape, x_rows: np.ndarray) -> Tensor:
    """Unroll the taped GRU from a zero state; x_rows (T, in) -> (T, hidden).

    Inputs enter as per-step column constants, so the replayed hidden states
    match the rollout path bitwise.
    """
    nh = p["U"].shape[1]
    h = tape.const(np.zeros((nh, 1)))
    rows = []
    for t in range(x_rows.shape[0]):
        h = gru_step_taped(p, tape.const(x_rows[t][:, None]), h)
        rows.append(h.reshape(1, nh))
    return concat(rows, axis=0)


# ---------------------------------------------------------------------------
# categorical actions

def action_onehot(branches: tuple[int, ...], action) -> np.ndarray:
    """(1, sum(branches)) one-hot row; ``None`` (pre-first-step) encodes zeros."""
    row = np.zeros((1, int(sum(branches))))
    if action is None:
        return row
    idx = np.atleast_1d(np.asarray(action, dtype=np.int64))
    if idx.shape != (len(branches),):
        raise ValueError(f"action has {idx.size} branches, expected {len(branches)}")
    off = 0
    for i, n in enumerate(branches):
        if not 0 <= idx[i] < n:
            raise ValueError(f"branch {i} action {idx[i]} out of range({n})")
        row[0, off + idx[i]] = 1.0
        off += n
    return row


def onehot_rows(branches: tuple[int, ...], actions: np.ndarray) -> np.ndarray:
    """Stack of one-hot rows for an action matrix (T, n_branches)."""
    actions = np.asarray(actions, dtype=np.int64).reshape(len(actions), len(branches))
    out = np.zeros((actions.shape[0], int(sum(branches))))
    off = 0
    for i, n in enumerate(branches):
        out[np.arange(actions.shape[0]), off + actions[:, i]] = 1.0
        off += n
    return out


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sample_action(logits: np.ndarray, branches: tuple[int, ...],
                  rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Per-branch categorical sample; log-prob sums over branches."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if logits.size != sum(branches):
        raise ValueError(f"logits size {logits.size} != sum(branches) {sum(branches)}")
    action = np.empty(len(branches), dtype=np.int64)
    log_prob = 0.0
    off = 0
    for i, n in enumerate(branches):
        logp = log_softmax_np(logits[off:off + n])
        cdf = np.cumsum(np.exp(logp))
        a = min(int(np.searchsorted(cdf, rng.random(), side="right")), n - 1)
        action[i] = a
        log_prob += float(logp[a])
        off += n
    return action, log_prob


def log_softmax_taped(logits: Tensor, branches: tuple[int, ...]) -> Tensor:
    """Per-branch log-softmax of a logits batch (T, sum(branches))."""
    parts = []
    off = 0
    for n in branches:
        block = logits[:, off:off + n]
        parts.append(block.softmax(axis=1).log())
        off += n
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def taken_log_prob(log_table: Tensor, branches: tuple[int, ...],
                   actions: np.ndarray) -> Tensor:
    """Per-step log-prob (T,) of the recorded actions (T, n_branches)."""
    actions = np.asarray(actions, dtype=np.int64).reshape(-1, len(branches))
    total = None
    off = 0
    for i, n in enumerate(branches):
        lp = log_table[:, off:off + n].gather_rows(actions[:, i])
        total = lp if total is None else total + lp
        off += n
    return total


# ---------------------------------------------------------------------------
# the five-module container

@dataclass(frozen=True)
class NetConfig:
    obs_dim: int
    branches: tuple[int, ...]
    hidden_dim: int = 128
    head_width: int = 64

    @property
    def act_dim(self) -> int:
        return int(sum(self.branches))


@dataclass
class ValueBundle:
    """One rollout step: logits, sampled action, estimates, advanced hidden."""

    logits: np.ndarray       # (act_dim,)
    action: np.ndarray       # (n_branches,) int64
    log_prob: float
    r_hat: float
    c_hat: float
    hidden: np.ndarray       # (hidden_dim, 1)


class CadeNets:
    """Parameters of the five trainable modules, plus both forward paths.

    Initialization order is fixed (trunk, actor, reward, cost, sdm from one
    generator), so equal seeds give equal parameters.
    """

    HEADS = ("trunk", "actor", "reward", "cost", "sdm")

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        a, w, h = cfg.act_dim, cfg.head_width, cfg.hidden_dim
        self.params: dict[str, dict[str, np.ndarray]] = {
            "trunk": gru_params(rng, cfg.obs_dim + a, h),
            "actor": mlp_params(rng, (h, w, w, a)),
            "reward": mlp_params(rng, (h + a, w, w, 1)),
            "cost": mlp_params(rng, (cfg.obs_dim, w, w, 1)),
            "sdm": mlp_params(rng, (cfg.obs_dim + a, w, w, 8)),
        }

    # ---- state and parameter plumbing ----

    def initial_hidden(self) -> np.ndarray:
        return np.zeros((self.cfg.hidden_dim, 1))

    def flat_params(self, heads=HEADS) -> dict[str, np.ndarray]:
        return {f"{head}.{k}": v for head in heads for k, v in self.params[head].items()}

    def bind(self, tape: Tape, head: str) -> dict[str, Tensor]:
        """Leaf tensors for one head's parameters on ``tape``."""
        return {k: tape.leaf(v, requires_grad=True) for k, v in self.params[head].items()}

    def save(self, path: str) -> None:
        checkpoint.save_params(path, self.flat_params())

    def load(self, path: str) -> None:
        loaded = checkpoint.load_params(path)
        current = self.flat_params()
        if set(loaded) != set(current):
            raise ValueError(f"checkpoint keys do not match networks: {path!r}")
        for name, arr in loaded.items():
            if arr.shape != current[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} != {current[name].shape}")
            current[name][...] = arr

    # ---- value-level forward (rollout path) ----

    def trunk_step_np(self, obs_flat: np.ndarray, prev_onehot: np.ndarray,
                      hidden: np.ndarray) -> np.ndarray:
        x = np.concatenate([obs_flat, prev_onehot], axis=1).T
        return gru_step_np(self.params["trunk"], x, hidden)

    def actor_logits_np(self, hidden: np.ndarray) -> np.ndarray:
        return mlp_np(self.params["actor"], hidden.T)[0]

    def reward_np(self, hidden: np.ndarray, action_row: np.ndarray) -> float:
        x = np.concatenate([hidden.T, action_row], axis=1)
        return float(mlp_np(self.params["reward"], x)[0, 0])

    def cost_np(self, obs_rows: np.ndarray) -> np.ndarray:
        """Predicted cost in [0, 1] per observation row; (B, obs) -> (B,)."""
        return mlp_np(self.params["cost"], obs_rows, out_act="sigmoid")[:, 0]

    def sdm_offsets_flat(self, x: np.ndarray) -> np.ndarray:
        """(B, obs+act) -> (B, 8) raw corner offsets; the warp-predictor form."""
        return mlp_np(self.params["sdm"], x)

    def sdm_offsets_np(self, obs_rows: np.ndarray, act_rows: np.ndarray) -> np.ndarray:
        """(B, obs) and (B, act) -> corner offsets (B, 4, 2)."""
        x = np.concatenate([obs_rows, act_rows], axis=1)
        return self.sdm_offsets_flat(x).reshape(-1, 4, 2)


def cade_forward(nets: CadeNets, obs: np.ndarray, prev_action,
                 hidden: np.ndarray, rng: np.random.Generator) -> ValueBundle:
    """One agent step: advance the trunk, sample an action, estimate r and c.

    ``obs`` is the patch grid (flattened internally); ``prev_action`` is the
    last executed action or ``None`` at the first step of an episode (zero
    one-hot).  The reward estimate conditions on the newly sampled action;
    the cost estimate conditions on the observation alone.
    """
    obs_flat = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    if obs_flat.shape[1] != nets.cfg.obs_dim:
        raise ValueError(f"observation dim {obs_flat.shape[1]} != {nets.cfg.obs_dim}")
    h = nets.trunk_step_np(obs_flat, action_onehot(nets.cfg.branches, prev_action), hidden)
    logits = nets.actor_logits_np(h)
    action, log_prob = sample_action(logits, nets.cfg.branches, rng)
    r_hat = nets.reward_np(h, action_onehot(nets.cfg.branches, action))
    c_hat = float(nets.cost_np(obs_flat)[0])
    return ValueBundle(logits, action, log_prob, r_hat, c_hat, h)


# ---------------------------------------------------------------------------
# optimizer

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping.

    Updates the parameter arrays in place, so a :class:`CadeNets` whose
    arrays were passed here sees every step.  Clipping rescales the whole
    gradient dict before the moment updates.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = 10.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if set(grads) != set(self.params):
            raise ValueError("gradient keys do not match optimizer parameters")
        if self.clip_norm is not None:
            norm = global_norm(grads)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
