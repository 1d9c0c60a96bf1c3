"""One-shot activity localization.

A small frame embedder (pixels -> 64 tanh -> E) is applied to every frame of a
snippet, embeddings are mean-pooled and a linear head scores the K subtasks of
the demonstration.  The initial parameters are meta-trained (MAML, exact or
first order, or Reptile) so that a few SGD steps on one segmented demo yield a
good snippet classifier for that task.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .data import NONE
from .errors import CoverageError, DataError, ShapeError
from .taskgen import group_by_task, majority_labels

MODES = ("maml_exact", "maml_first_order", "reptile")
ALWAYS_NONE = "always"


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std)) and np.all(self.std > 0)):
            raise ValueError("normalization must be finite with positive std")

    @classmethod
    def fit(cls, videos):
        return cls.fit_frames(np.concatenate([v.frames.reshape(-1, v.frames.shape[-1]) for v in videos]))

    @classmethod
    def fit_frames(cls, frames):
        frames = np.asarray(frames, dtype=np.float64)
        frames = frames.reshape(-1, frames.shape[-1])
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-3))

    @classmethod
    def identity(cls, channels=3):
        return cls(np.zeros(channels), np.ones(channels))

    def apply(self, frames):
        """``(..., H, W, C)`` frames -> ``(n_frames, H*W*C)`` float64 rows."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.mean.shape[0]:
            raise ShapeError(f"{frames.shape[-1]} channels vs normalization for {self.mean.shape[0]}")
        x = (frames - self.mean) / self.std
        return x.reshape(-1, int(np.prod(frames.shape[-3:])))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def localizer_spec(n_pixels, K, hidden=64, embed=32):
    return dn.NetSpec((n_pixels, hidden, embed, K), ("tanh", "linear"))


def embed_spec(spec):
    """The pooled-embedding part of a localizer spec (head removed)."""
    return dn.NetSpec(spec.layer_sizes[:-1], spec.activations[:1])


def with_head_width(spec, K):
    return dn.NetSpec(spec.layer_sizes[:-1] + (K,), spec.activations)


@dataclass
class LocalizerConfig:
    mode: str = "maml_exact"
    inner_alpha: float = 0.1
    meta_lr: float | None = None
    iters: int = 300
    task_batch: int = 6
    seed: int = 0
    snippet: int = 4
    hidden: int = 64
    embed: int = 32
    finetune_steps: int = 5
    reptile_inner_steps: int = 5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown meta-training mode {self.mode!r}")
        if self.meta_lr is None:
            self.meta_lr = 0.5 if self.mode == "reptile" else 1e-4


@dataclass
class MetaModel:
    spec: dn.NetSpec
    theta: np.ndarray
    inner_alpha: float
    trained_with: str
    normalization: Normalization
    snippet: int = 4
    finetune_steps: int = 5
    seed: int = 0
    iterations: int = 0
    history: list = field(default_factory=list, repr=False)

    @property
    def K(self):
        return self.spec.n_out


# -- per-video arrays --------------------------------------------------------

def snippet_batch(video, norm, S, labels=None):
    """Softmax-CE batch over a video's snippets (``group=S`` rows per sample)."""
    n = len(video) // S
    if n == 0:
        raise DataError("video shorter than one snippet")
    x = norm.apply(video.frames[:n * S])
    if labels is None:
        labels = majority_labels(video.frame_labels, S)
    return dn.Batch(x, np.asarray(labels), "softmax_ce", group=S)


def snippet_logits(spec, params, snippet_frames, norm):
    """Logits of one snippet (``(S, H, W, C)`` frames)."""
    x = norm.apply(snippet_frames)
    if x.shape[1] != spec.n_in:
        raise ShapeError(f"snippet has {x.shape[1]} pixels, model expects {spec.n_in}")
    return dn.forward(spec, params, x, group=x.shape[0])[0]


def video_logits(spec, params, frames, norm, S):
    n = frames.shape[0] // S
    if n == 0:
        return np.zeros((0, spec.n_out))
    return dn.forward(spec, params, norm.apply(frames[:n * S]), group=S)


# -- fine-tuning and localization --------------------------------------------

def _check_coverage(labels, K):
    missing = sorted(set(range(K)) - set(int(x) for x in labels))
    if missing:
        raise CoverageError(f"demo has no snippet of class(es) {missing}")


def finetune(spec, theta, batch, alpha, steps):
    opt = dn.sgd(alpha)
    theta = np.asarray(theta)
    for _ in range(steps):
        _, g = dn.loss_and_grad(spec, theta, batch)
        theta, opt = dn.optimizer_step(opt, theta, g)
    return theta


def inner_finetune(meta, demo, steps=None, alpha=None):
    """theta_task after ``steps`` full-batch SGD steps on the demo's labeled snippets."""
    steps = meta.finetune_steps if steps is None else steps
    alpha = meta.inner_alpha if alpha is None else alpha
    batch = snippet_batch(demo, meta.normalization, meta.snippet)
    _check_coverage(batch.targets, meta.K)
    return finetune(meta.spec, meta.theta, batch, alpha, steps)


@dataclass
class LocalizationResult:
    labels: np.ndarray
    max_prob: np.ndarray


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def localize(spec, theta_tau, frames, norm, S, threshold=None):
    """Label every non-overlapping snippet; below-threshold maxima become NONE.

    ``threshold=None`` disables the none-of-the-above rule; ``"always"``
    rejects everything.
    """
    probs = softmax(video_logits(spec, theta_tau, frames, norm, S))
    labels = np.argmax(probs, axis=1).astype(np.int64)  # argmax picks the lowest index on ties
    top = probs.max(axis=1, initial=0.0) if probs.size else np.zeros(0)
    if threshold == ALWAYS_NONE:
        labels[:] = NONE
    elif threshold is not None:
        labels[top < threshold] = NONE
    return LocalizationResult(labels, top)


def localize_with_demo(meta, demo, target_frames, threshold=None, steps=None):
    theta_tau = inner_finetune(meta, demo, steps)
    return localize(meta.spec, theta_tau, target_frames, meta.normalization, meta.snippet, threshold)


# -- meta-training -----------------------------------------------------------

def meta_train(videos, config, normalization=None, progress=None):
    """Meta-learn initial localizer parameters from multi-task training videos."""
    tasks = group_by_task(videos)
    if len(tasks) < 2:
        raise DataError("meta-training needs at least two tasks")
    for tid, vids in tasks.items():
        if len(vids) < 2:
            raise DataError(f"task {tid} has fewer than two videos; cannot draw support and query")
    K = next(iter(tasks.values()))[0].K
    norm = normalization or Normalization.fit(videos)
    n_pixels = int(np.prod(videos[0].frames.shape[1:]))
    spec = localizer_spec(n_pixels, K, config.hidden, config.embed)
    theta = dn.init_params(spec, config.seed)
    S = config.snippet
    cache = {}

    def batch_of(v):
        key = id(v)
        if key not in cache:
            cache[key] = snippet_batch(v, norm, S)
        return cache[key]

    rng = np.random.default_rng(config.seed)
    task_ids = sorted(tasks)
    opt = dn.adam(config.meta_lr, theta.size)
    history = []
    for it in range(config.iters):
        chosen = rng.choice(task_ids, size=min(config.task_batch, len(task_ids)), replace=False)
        pairs = []
        for tid in chosen:
            i, j = rng.choice(len(tasks[tid]), size=2, replace=False)
            pairs.append((batch_of(tasks[tid][i]), batch_of(tasks[tid][j])))
        total = np.zeros(theta.size)
        losses = []
        if config.mode == "reptile":
            for support, _ in pairs:  # task-index order keeps the reduction deterministic
                adapted = finetune(spec, theta, support, config.inner_alpha, config.reptile_inner_steps)
                total += adapted.astype(np.float64) - theta
            theta = (theta + config.meta_lr * total / len(pairs)).astype(np.float32)
        else:
            first_order = config.mode == "maml_first_order"
            for support, query in pairs:
                loss, g = dn.meta_grad_maml(spec, theta, support, query, config.inner_alpha, first_order)
                total += g
                losses.append(loss)
            theta, opt = dn.optimizer_step(opt, theta, total)
            history.append(float(np.mean(losses)))
        if progress is not None:
            progress(it, history[-1] if history else None)
    return MetaModel(spec, theta, config.inner_alpha, config.mode, norm, S,
                     config.finetune_steps, config.seed, config.iters, history)


def untrained_model(videos, config, normalization=None):
    """Same architecture at its initialization, for the no-meta-training control."""
    K = videos[0].K
    norm = normalization or Normalization.fit(videos)
    spec = localizer_spec(int(np.prod(videos[0].frames.shape[1:])), K, config.hidden, config.embed)
    return MetaModel(spec, dn.init_params(spec, config.seed), config.inner_alpha, "none", norm,
                     config.snippet, config.finetune_steps, config.seed, 0)


# -- nearest-snippet classifier baseline -------------------------------------

@dataclass
class BaselineModel:
    spec: dn.NetSpec
    params: np.ndarray
    color_classes: tuple
    normalization: Normalization
    snippet: int = 4
    feature_layer: str = "pooled_embedding"

    @property
    def feature_dim(self):
        return self.spec.layer_sizes[-2]

    def features(self, frames):
        S = self.snippet
        n = frames.shape[0] // S
        espec = embed_spec(self.spec)
        k = dn.param_count(espec)
        return dn.forward(espec, self.params[:k], self.normalization.apply(frames[:n * S]), group=S)


@dataclass
class BaselineConfig:
    steps: int = 400
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    snippet: int = 4
    hidden: int = 64
    embed: int = 32


def baseline_train(videos, all_colors, config, normalization=None):
    """Classify snippets by the color being pursued, over every training color."""
    norm = normalization or Normalization.fit(videos)
    S = config.snippet
    classes = tuple(sorted(all_colors)) if not isinstance(all_colors, int) else tuple(range(all_colors))
    xs, ys = [], []
    for v in videos:
        n = len(v) // S
        if n == 0:
            continue
        xs.append(norm.apply(v.frames[:n * S]).reshape(n, S, -1))
        colors = [v.task.target_colors[lab] for lab in majority_labels(v.frame_labels, S)]
        ys.append(np.array([classes.index(c) for c in colors]))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    missing = sorted(set(range(len(classes))) - set(y.tolist()))
    if missing:
        raise CoverageError(f"no training snippets for color class(es) {[classes[m] for m in missing]}")
    spec = localizer_spec(x.shape[2], len(classes), config.hidden, config.embed)
    params = dn.init_params(spec, config.seed)
    opt = dn.adam(config.lr, params.size)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.steps):
        idx = rng.choice(len(y), size=min(config.batch, len(y)), replace=False)
        batch = dn.Batch(x[idx].reshape(-1, x.shape[2]), y[idx], "softmax_ce", group=S)
        _, g = dn.loss_and_grad(spec, params, batch)
        params, opt = dn.optimizer_step(opt, params, g)
    return BaselineModel(spec, params, classes, norm, S)


def baseline_localize(demo_features, demo_labels, target_features):
    """Label of the Euclidean-nearest demo snippet; ties go to the earlier demo snippet."""
    demo = np.asarray(demo_features, dtype=np.float64)
    target = np.atleast_2d(np.asarray(target_features, dtype=np.float64))
    labels = np.asarray(demo_labels)
    d2 = ((target[:, None, :] - demo[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)  # first minimum = earliest demo snippet
    return LocalizationResult(labels[nearest].astype(np.int64), np.ones(target.shape[0]))


def baseline_with_demo(model, demo, target_frames):
    S = model.snippet
    labels = majority_labels(demo.frame_labels, S)
    _check_coverage(labels, demo.K)
    return baseline_localize(model.features(demo.frames), labels, model.features(target_frames))


# -- metrics -----------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    per_class_iou: np.ndarray
    miou: float


def localization_metrics(gt, pred, K):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"gt {gt.shape} vs pred {pred.shape}")
    accuracy = float(np.mean(gt == pred)) if gt.size else 0.0
    iou = np.full(K, np.nan)
    for k in range(K):
        union = np.sum((gt == k) | (pred == k))
        if union:
            iou[k] = np.sum((gt == k) & (pred == k)) / union
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else 0.0
    return Metrics(accuracy, iou, miou)


def evaluate_split(videos, predict, S):
    """Mean mIoU and accuracy over ordered (demo, target) video pairs within each task.

    Every video of a task serves once as the demo for all the others.
    ``predict(demo, target_frames)`` returns a LocalizationResult.
    """
    mious, accs = [], []
    for _, vids in sorted(group_by_task(videos).items()):
        for i, demo in enumerate(vids):
            for j, target in enumerate(vids):
                if i == j:
                    continue
                gt = majority_labels(target.frame_labels, S)
                pred = predict(demo, target.frames).labels
                m = localization_metrics(gt, pred, target.K)
                mious.append(m.miou)
                accs.append(m.accuracy)
    return float(np.mean(mious)), float(np.mean(accs))
