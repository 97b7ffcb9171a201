"""Dynamics-model study: warp predictor vs dense MLP vs copy-forward.

Collects random-walk transition datasets, trains each model kind on
one-step prediction, and scores 10-step recursive rollouts with patch-level
IoU and L1 curves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor
from .homography import jaccard_loss, sdm_predict, solve_homography, warp
from .nets import Adam, mlp_np, mlp_params, mlp_taped, onehot_rows

__all__ = [
    "DatasetError",
    "TransitionDataset",
    "DynModel",
    "MODEL_KINDS",
    "collect_dataset",
    "train_dyn",
    "rollout_eval",
    "known_cell_iou",
    "write_dyn_metrics",
]

MODEL_KINDS = ("sdm", "sdm-mlp", "baseline")


class DatasetError(RuntimeError):
    pass


@dataclass
class TransitionDataset:
    """Ordered transitions with an episode-contiguous train/test split."""

    obs: np.ndarray          # (N, r, c)
    actions: np.ndarray      # (N, n_branches) int
    next_obs: np.ndarray     # (N, r, c)
    episode_ids: np.ndarray  # (N,)
    n_train: int
    branches: tuple[int, ...]
    env_name: str = ""
    level: str = ""

    def __len__(self):
        return self.obs.shape[0]

    @property
    def train(self):
        return slice(0, self.n_train)

    @property
    def test(self):
        return slice(self.n_train, len(self))

    @property
    def obs_shape(self):
        return self.obs.shape[1:]

    def check_chain(self) -> None:
        """Adjacent same-episode rows must hand the observation forward."""
        same = self.episode_ids[:-1] == self.episode_ids[1:]
        if not np.array_equal(self.next_obs[:-1][same], self.obs[1:][same]):
            raise DatasetError("broken transition chain inside an episode")

    def check_coverage(self) -> None:
        """Every (branch, value) pair must occur in the training rows."""
        rows = self.actions[self.train]
        missing = [(b, v) for b, n in enumerate(self.branches)
                   for v in range(n) if not np.any(rows[:, b] == v)]
        if missing:
            raise DatasetError(f"actions never triggered in train split: {missing}")


def collect_dataset(env, rng: np.random.Generator, n_train: int = 1720,
                    n_test: int = 492, level: str = "") -> TransitionDataset:
    """Uniform-random rollouts until the split sizes are filled.

    The action stream comes from ``rng``; episode randomness comes from the
    env's own seeded generator, so a fixed (env seed, rng seed) pair yields
    an identical dataset.
    """
    branches = tuple(env.branches)
    need = n_train + n_test
    obs_rows, act_rows, next_rows, ep_ids = [], [], [], []
    ep = 0
    while len(obs_rows) < need:
        obs = env.reset()
        while True:
            action = rng.integers(branches if len(branches) > 1 else branches[0])
            res = env.step(action if len(branches) > 1 else int(action))
            obs_rows.append(obs)
            act_rows.append(np.atleast_1d(action))
            next_rows.append(res.obs)
            ep_ids.append(ep)
            obs = res.obs
            if res.terminal or len(obs_rows) >= need:
                break
        ep += 1
    ds = TransitionDataset(
        obs=np.asarray(obs_rows, dtype=np.float64),
        actions=np.asarray(act_rows, dtype=np.int64),
        next_obs=np.asarray(next_rows, dtype=np.float64),
        episode_ids=np.asarray(ep_ids, dtype=np.int64),
        n_train=n_train,
        branches=branches,
        env_name=type(env).__name__,
        level=level,
    )
    ds.check_chain()
    ds.check_coverage()
    return ds


@dataclass
class DynModel:
    """A trained one-step predictor; ``predict`` maps grids forward."""

    kind: str
    params: dict | None
    obs_shape: tuple[int, int]
    branches: tuple[int, ...]
    loss_curve: list[float] = field(default_factory=list)

    def predict(self, grids: np.ndarray, actions: np.ndarray) -> np.ndarray:
        grids = np.asarray(grids, dtype=np.float64)
        single = grids.ndim == 2
        g = grids[None] if single else grids
        acts = np.atleast_2d(np.asarray(actions))
        oh = onehot_rows(self.branches, acts)
        if self.kind == "baseline":
            out = g.copy()
        elif self.kind == "sdm":
            out = sdm_predict(lambda x: mlp_np(self.params, x), g, oh)
        elif self.kind == "sdm-mlp":
            x = np.concatenate([g.reshape(g.shape[0], -1), oh], axis=1)
            out = mlp_np(self.params, x, out_act="sigmoid").reshape(g.shape)
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        return out[0] if single else out

    def predict_with_mask(self, grids: np.ndarray, actions: np.ndarray):
        """Prediction plus the known-cell mask (warp model only)."""
        if self.kind != "sdm":
            raise ValueError("known-cell masks exist only for the warp model")
        grids = np.asarray(grids, dtype=np.float64)
        single = grids.ndim == 2
        g = grids[None] if single else grids
        oh = onehot_rows(self.branches, np.atleast_2d(np.asarray(actions)))
        out, mask = sdm_predict(lambda x: mlp_np(self.params, x), g, oh,
                                return_mask=True)
        return (out[0], mask[0]) if single else (out, mask)


def _softplus(z: Tensor) -> Tensor:
    # max(z, 0) + log(1 + exp(-|z|)): overflow-free in both tails
    mag = z.relu() + (-z).relu()
    return z.relu() + (1.0 + (-mag).exp()).log()


def _bce_from_logits(z: Tensor, targets: Tensor) -> Tensor:
    return (_softplus(z) - targets * z).mean()


def train_dyn(kind: str, dataset: TransitionDataset, epochs: int = 30,
              batch: int = 64, lr: float = 0.001, seed: int = 0) -> DynModel:
    """Fit one model kind on the train split; records per-epoch mean loss."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    r, c = dataset.obs_shape
    obs_dim = r * c
    act_dim = int(sum(dataset.branches))
    if kind == "baseline":
        return DynModel(kind, None, (r, c), dataset.branches)

    rng = np.random.default_rng(seed)
    if kind == "sdm":
        params = mlp_params(rng, (obs_dim + act_dim, 64, 64, 8))
    else:
        params = mlp_params(rng, (obs_dim + act_dim, 64, 64, obs_dim))
    opt = Adam(params, lr=lr)

    idx_all = np.arange(dataset.n_train)
    grids = dataset.obs[dataset.train]
    onehots = onehot_rows(dataset.branches, dataset.actions[dataset.train])
    targets = dataset.next_obs[dataset.train]
    curve = []
    for _ in range(epochs):
        order = rng.permutation(idx_all)
        epoch_losses = []
        for start in range(0, len(order), batch):
            rows = order[start:start + batch]
            tape = Tape()
            leaves = {k: tape.leaf(v, k) for k, v in params.items()}
            x = tape.const(np.concatenate(
                [grids[rows].reshape(len(rows), -1), onehots[rows]], axis=1))
            if kind == "sdm":
                offsets = mlp_taped(leaves, x).reshape((len(rows), 4, 2))
                H = solve_homography(offsets, r, c)
                pred = warp(tape.const(grids[rows]), H)
                loss = jaccard_loss(pred, tape.const(targets[rows]))
            else:
                logits = mlp_taped(leaves, x)
                loss = _bce_from_logits(
                    logits, tape.const(targets[rows].reshape(len(rows), -1)))
            tape.backward(loss)
            opt.step({k: t.grad for k, t in leaves.items()})
            epoch_losses.append(float(loss.values))
        curve.append(float(np.mean(epoch_losses)))
    return DynModel(kind, params, (r, c), dataset.branches, curve)


def _iou(pred_binary: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample IoU of binary grids; empty union counts as agreement."""
    p = pred_binary.reshape(pred_binary.shape[0], -1)
    t = truth.reshape(p.shape) > 0.5
    inter = (p & t).sum(axis=1)
    union = (p | t).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def rollout_eval(model: DynModel, dataset: TransitionDataset,
                 horizon: int = 10):
    """Recursive prediction curves over sliding test windows.

    Every test episode contributes one window per admissible start index
    (shifted one step at a time).  Raw predictions feed back into the
    model; IoU binarizes at 0.5, L1 stays on raw values.  Returns rows
    (step, iou_mean, iou_std, l1_mean, l1_std) and the skipped-episode
    count.
    """
    test = dataset.test
    ids = dataset.episode_ids[test]
    obs = dataset.obs[test]
    nxt = dataset.next_obs[test]
    acts = dataset.actions[test]
    iou_per_step = [[] for _ in range(horizon)]
    l1_per_step = [[] for _ in range(horizon)]
    skipped = 0
    for ep in np.unique(ids):
        rows = np.nonzero(ids == ep)[0]
        seq = np.concatenate([obs[rows], nxt[rows][-1:]], axis=0)
        L = len(rows)
        if L < horizon:
            skipped += 1
            continue
        starts = np.arange(L - horizon + 1)
        preds = seq[starts].copy()
        for h in range(1, horizon + 1):
            preds = model.predict(preds, acts[rows[starts + h - 1]])
            truth = seq[starts + h]
            iou_per_step[h - 1].extend(_iou(preds > 0.5, truth))
            l1_per_step[h - 1].extend(
                np.abs(preds - truth).mean(axis=(1, 2)))
    rows_out = []
    for h in range(horizon):
        iou = np.asarray(iou_per_step[h])
        l1 = np.asarray(l1_per_step[h])
        if iou.size == 0:
            raise DatasetError("no test window long enough for the horizon")
        rows_out.append({
            "step": h + 1,
            "iou_mean": float(iou.mean()), "iou_std": float(iou.std()),
            "l1_mean": float(l1.mean()), "l1_std": float(l1.std()),
        })
    return rows_out, skipped


def known_cell_iou(model: DynModel, dataset: TransitionDataset) -> float:
    """Mean 1-step IoU over cells the warp marks as known, on the test split."""
    test = dataset.test
    pred, mask = model.predict_with_mask(dataset.obs[test],
                                         dataset.actions[test])
    p = (pred > 0.5) & mask
    t = (dataset.next_obs[test] > 0.5) & mask
    inter = (p & t).sum(axis=(1, 2))
    union = (p | t).sum(axis=(1, 2))
    per = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return float(per.mean())


def write_dyn_metrics(path: str, results: dict[str, list[dict]]) -> None:
    """dyn_metrics.csv: one row per (model, step); repr keeps bytes stable."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "step", "iou_mean", "iou_std",
                         "l1_mean", "l1_std"])
        for model, rows in results.items():
            for row in rows:
                writer.writerow([model, row["step"],
                                 repr(row["iou_mean"]), repr(row["iou_std"]),
                                 repr(row["l1_mean"]), repr(row["l1_std"])])
