"""Per-subtask reward inference from frame-order prediction.

A frame embedder maps each frame to an E-vector, a progress predictor maps a
pair of embeddings to one logit ``g(a, b)`` that should be positive when ``a``
precedes ``b``.  Trained with logistic cross entropy on frame pairs taken from
the same video and the same (possibly predicted) subtask label.  The step
reward is anchored on the first frame: ``R_t = g(o0, o_{t+1}) - g(o0, o_t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .errors import DataError, ShapeError
from .localizer import Normalization


@dataclass
class RewardModel:
    embed_spec: dn.NetSpec
    embed_params: np.ndarray
    pred_spec: dn.NetSpec
    pred_params: np.ndarray
    normalization: Normalization
    subtask_id: int = 0
    final_loss: float = float("nan")
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.pred_spec.n_in != 2 * self.embed_spec.n_out:
            raise ShapeError("predictor input must be twice the embedding width")

    @property
    def params(self):
        return np.concatenate([self.embed_params, self.pred_params])

    def embed(self, frames):
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        x = self.normalization.apply(frames)
        if x.shape[1] != self.embed_spec.n_in:
            raise ShapeError(f"frame has {x.shape[1]} values, model expects {self.embed_spec.n_in}")
        return dn.forward(self.embed_spec, self.embed_params, x)

    def g_embedded(self, ea, eb):
        ea, eb = np.broadcast_arrays(np.atleast_2d(ea), np.atleast_2d(eb))
        return dn.forward(self.pred_spec, self.pred_params, np.concatenate([ea, eb], axis=1))[:, 0]


def new_reward_model(n_pixels, normalization, seed, hidden=64, embed=32, subtask_id=0):
    espec = dn.mlp([n_pixels, hidden, embed])
    pspec = dn.mlp([2 * embed, hidden, 1])
    return RewardModel(espec, dn.init_params(espec, seed), pspec, dn.init_params(pspec, seed + 1),
                       normalization, subtask_id)


def g_eval(model, a, b):
    """Raw order logit for one pair of frames."""
    return float(model.g_embedded(model.embed(a), model.embed(b))[0])


def step_reward(model, o0, ot, ot1):
    return g_eval(model, o0, ot1) - g_eval(model, o0, ot)


def anchored_scores(model, o0, frames):
    """``g(o0, o_t)`` for every frame, one batched pass."""
    e0 = model.embed(o0)
    return model.g_embedded(e0, model.embed(frames))


def progress_curve(model, frames):
    """Cumulative anchored step reward along a clip (length ``len(frames) - 1``).

    Each ``g(o0, o_t)`` is evaluated on its own, exactly as ``step_reward`` does,
    so the curve equals the running sum of ``step_reward`` values bit for bit.
    """
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise DataError("need at least two frames")
    e0 = model.embed(frames[0])
    scores = np.array([float(model.g_embedded(e0, model.embed(f))[0]) for f in frames])
    rewards = scores[1:] - scores[:-1]
    out = np.empty_like(rewards)
    total = 0.0
    for t, r in enumerate(rewards):
        total += r
        out[t] = total
    return out


# -- pair sampling -----------------------------------------------------------

@dataclass
class OrderPair:
    frame_a: np.ndarray
    frame_b: np.ndarray
    target: int
    video: int
    activity: int


@dataclass
class OrderPairs:
    """Frame pairs held as indices into a shared list of videos' frames."""
    frames: list
    video: np.ndarray
    idx_a: np.ndarray
    idx_b: np.ndarray
    target: np.ndarray
    activity: int

    def __len__(self):
        return self.target.shape[0]

    def __getitem__(self, i):
        v = self.video[i]
        return OrderPair(self.frames[v][self.idx_a[i]], self.frames[v][self.idx_b[i]],
                         int(self.target[i]), int(v), self.activity)

    def subset(self, idx):
        return OrderPairs(self.frames, self.video[idx], self.idx_a[idx], self.idx_b[idx],
                          self.target[idx], self.activity)

    def gather(self, idx):
        fa = np.stack([self.frames[v][i] for v, i in zip(self.video[idx], self.idx_a[idx])])
        fb = np.stack([self.frames[v][i] for v, i in zip(self.video[idx], self.idx_b[idx])])
        return fa, fb, self.target[idx]


def sample_order_pairs(videos, activity, n, min_gap=2, seed=0, flip_prob=0.0, labels=None, max_gap=None):
    """Frame pairs from one video with the same label ``activity``, ``|i - j| >= min_gap``.

    ``labels`` overrides each video's ``frame_labels`` (e.g. predicted labels).
    Presentation order is a fair coin, so about half the targets are 1;
    ``flip_prob`` corrupts that fraction of targets after sampling.
    """
    rng = np.random.default_rng(seed)
    frames, pools, weights = [], [], []
    for k, v in enumerate(videos):
        lab = np.asarray(v.frame_labels if labels is None else labels[k])
        idx = np.flatnonzero(lab == activity)
        frames.append(v.frames)
        ok = idx.size >= 2 and idx[-1] - idx[0] >= min_gap
        pools.append(idx)
        weights.append(idx.size if ok else 0)
    weights = np.array(weights, dtype=np.float64)
    if weights.sum() == 0:
        raise DataError(f"activity {activity}: no video has two labeled frames {min_gap} apart")
    weights /= weights.sum()
    vid = np.empty(n, dtype=np.int64)
    ia = np.empty(n, dtype=np.int64)
    ib = np.empty(n, dtype=np.int64)
    for k in range(n):
        v = rng.choice(len(videos), p=weights)
        pool = pools[v]
        while True:
            i, j = rng.choice(pool, size=2, replace=False)
            if abs(i - j) >= min_gap and (max_gap is None or abs(i - j) <= max_gap):
                break
        vid[k], ia[k], ib[k] = v, i, j
    target = (ia < ib).astype(np.int64)
    if flip_prob > 0:
        flip = rng.random(n) < flip_prob
        target = np.where(flip, 1 - target, target)
    return OrderPairs(frames, vid, ia, ib, target, activity)


# -- training ----------------------------------------------------------------

@dataclass
class RewardConfig:
    lr: float = 1e-3
    steps: int = 800
    batch: int = 64
    seed: int = 0
    hidden: int = 64
    embed: int = 32
    n_pairs: int = 4000
    min_gap: int = 2
    max_gap: int | None = None
    flip_prob: float = 0.0
    weight_decay: float = 0.0
    pred_decay: float = 0.1


def _loss_grad(model, fa, fb, target):
    norm = model.normalization
    xa, xb = norm.apply(fa), norm.apply(fb)
    ea, ta = dn.forward_trace(model.embed_spec, model.embed_params, xa)
    eb, tb = dn.forward_trace(model.embed_spec, model.embed_params, xb)
    z, tp = dn.forward_trace(model.pred_spec, model.pred_params, np.concatenate([ea, eb], axis=1))
    per, g_out = dn._loss_terms("logistic_ce", z, target)
    dn._check_finite(per)
    g_pred, g_in = dn.backprop(model.pred_spec, tp, g_out, need_input=True)
    E = ea.shape[1]
    g_ea, _ = dn.backprop(model.embed_spec, ta, g_in[:, :E])
    g_eb, _ = dn.backprop(model.embed_spec, tb, g_in[:, E:])
    return float(per.mean()), g_ea + g_eb, g_pred


def pair_loss(model, pairs, idx=None):
    idx = np.arange(len(pairs)) if idx is None else idx
    fa, fb, t = pairs.gather(idx)
    z = model.g_embedded(model.embed(fa), model.embed(fb))
    return float(np.mean(np.logaddexp(0.0, z) - t * z))


def pair_accuracy(model, pairs):
    """Fraction of pairs where ``g > 0`` agrees with the target."""
    fa, fb, t = pairs.gather(np.arange(len(pairs)))
    z = model.g_embedded(model.embed(fa), model.embed(fb))
    return float(np.mean((z > 0) == (t == 1)))


def train_reward(pairs, config, normalization=None, subtask_id=None):
    """Adam on logistic cross entropy over mini-batches of order pairs."""
    if len(pairs) < 2 or np.unique(pairs.target).size < 2:
        raise DataError("order pairs must contain both target values")
    norm = normalization or Normalization.fit_frames(np.concatenate(pairs.frames))
    n_pixels = int(np.prod(pairs.frames[0].shape[1:]))
    model = new_reward_model(n_pixels, norm, config.seed, config.hidden, config.embed,
                             pairs.activity if subtask_id is None else subtask_id)
    opt_e = dn.adam(config.lr, model.embed_params.size)
    opt_p = dn.adam(config.lr, model.pred_params.size)
    rng = np.random.default_rng(config.seed)
    loss = float("nan")
    for _ in range(config.steps):
        idx = rng.choice(len(pairs), size=min(config.batch, len(pairs)), replace=False)
        fa, fb, t = pairs.gather(idx)
        loss, g_e, g_p = _loss_grad(model, fa, fb, t)
        if config.weight_decay:
            g_e = g_e + config.weight_decay * model.embed_params
            g_p = g_p + config.weight_decay * model.pred_params
        if config.pred_decay:
            g_p = g_p + config.pred_decay * model.pred_params
        model.embed_params, opt_e = dn.optimizer_step(opt_e, model.embed_params, g_e)
        model.pred_params, opt_p = dn.optimizer_step(opt_p, model.pred_params, g_p)
        model.history.append(loss)
    model.final_loss = loss
    return model
