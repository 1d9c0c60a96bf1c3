"""Task splits, dataset generation, snippet slicing and the LFOD dataset file."""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .data import NONE, LabeledVideo, TaskSpec
from .errors import ConfigError, CorruptionError, FormatError, GenerationError, VersionError
from .parallel import pmap
from .reacher import EnvConfig, rollout_expert

SPLITS = ("train", "validation", "meta_test", "auxiliary")
MAX_ATTEMPTS = 5


def sample_task_splits(train_colors, meta_colors, K, n_targets=4):
    """All K-combinations of each color set, lexicographic; distractors from the same set."""
    train_colors, meta_colors = sorted(train_colors), sorted(meta_colors)
    if set(train_colors) & set(meta_colors):
        raise ConfigError("train and meta-test color sets overlap")

    def tasks_for(colors):
        if len(colors) < K:
            raise ConfigError(f"need at least {K} colors, got {colors}")
        n_distract = min(n_targets - K, len(colors) - K)
        out = []
        for combo in itertools.combinations(colors, K):
            rest = [c for c in colors if c not in combo]
            out.append(TaskSpec(combo, tuple(rest[:n_distract])))
        return out

    return tasks_for(train_colors), tasks_for(meta_colors)


@dataclass
class DatasetManifest:
    split: str
    tasks: list
    videos_per_task: int
    seed: int
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.videos_per_task < 1:
            raise ConfigError("videos_per_task must be positive")

    def to_dict(self):
        return {
            "split": self.split,
            "tasks": [t.to_dict() for t in self.tasks],
            "videos_per_task": self.videos_per_task,
            "seed": self.seed,
            "env": self.env.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["split"], [TaskSpec.from_dict(t) for t in d["tasks"]],
                   d["videos_per_task"], d["seed"], EnvConfig.from_dict(d["env"]))


def video_seed(manifest_seed, task_index, video_index, attempt=0):
    ss = np.random.SeedSequence([manifest_seed, task_index, video_index, attempt])
    return int(ss.generate_state(1)[0])


def _generate_one(manifest, job):
    ti, vi = job
    task = manifest.tasks[ti]
    orders = list(itertools.permutations(task.target_colors))
    order = orders[vi % len(orders)]
    last = None
    for attempt in range(MAX_ATTEMPTS):
        seed = video_seed(manifest.seed, ti, vi, attempt)
        try:
            video = rollout_expert(manifest.env, task, order, seed)
        except GenerationError as exc:
            last = exc
            continue
        video.task_id = ti
        return video
    raise GenerationError(f"task {task.target_colors}: {MAX_ATTEMPTS} attempts failed ({last})")


def generate_dataset(manifest):
    jobs = [(ti, vi) for ti in range(len(manifest.tasks)) for vi in range(manifest.videos_per_task)]
    return pmap(partial(_generate_one, manifest), jobs)


def majority_labels(frame_labels, S):
    """Per-snippet majority over non-overlapping windows; ties go to the earlier label."""
    labels = np.asarray(frame_labels)
    n = labels.shape[0] // S
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        window = labels[i * S:(i + 1) * S]
        best, best_count = window[0], -1
        seen = []
        for lab in window:  # first-appearance order decides ties
            if lab in seen:
                continue
            seen.append(lab)
            count = int(np.sum(window == lab))
            if count > best_count:
                best, best_count = lab, count
        out[i] = best
    return out


@dataclass
class Snippet:
    frames: np.ndarray
    video_id: int
    start: int


def snippet_slice(video, S, video_id=0):
    """Non-overlapping snippets of ``S`` frames; trailing frames are dropped."""
    if S < 1:
        raise ValueError("S must be at least 1")
    labels = majority_labels(video.frame_labels, S)
    return [(Snippet(video.frames[i * S:(i + 1) * S], video_id, i * S), int(lab))
            for i, lab in enumerate(labels)]


def snippet_array(video, S):
    """All snippet frames of a video as ``(n_snippets * S, n_pixels)`` plus snippet labels."""
    n = len(video) // S
    x = video.frames[:n * S].reshape(n * S, -1)
    return x, majority_labels(video.frame_labels, S)


def frames_from_snippet_labels(snippet_labels, n_frames, S):
    """Broadcast snippet labels back to frames; dropped trailing frames get NONE."""
    out = np.full(n_frames, NONE, dtype=np.int64)
    out[:len(snippet_labels) * S] = np.repeat(np.asarray(snippet_labels), S)
    return out


# -- LFOD file format --------------------------------------------------------

MAGIC = b"LFOD"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def _sections(videos):
    for v in videos:
        yield v.frames
    for v in videos:
        yield v.states
    for v in videos:
        yield v.actions


def write_dataset(path, videos, manifest=None):
    if videos:
        dims = list(videos[0].frames.shape[1:])
    else:
        dims = []
    header = {
        "manifest": manifest.to_dict() if manifest is not None else None,
        "dims": dims,
        "videos": [
            {
                "frames": len(v),
                "labels": [int(x) for x in v.frame_labels],
                "order": list(v.order),
                "task": v.task.to_dict(),
                "task_id": int(v.task_id),
                "seed": int(v.seed),
                "target_positions": [[float(a) for a in row] for row in v.target_positions],
                "meta": v.meta,
            }
            for v in videos
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for arr in _sections(videos):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_dataset(path, with_manifest=False):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptionError("file shorter than the fixed header", offset=len(data))
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported LFOD version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptionError("truncated header", offset=len(data))
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    dims = tuple(header["dims"])
    frame_size = int(np.prod(dims)) if dims else 0
    metas = header["videos"]

    def take(count):
        nonlocal offset
        nbytes = 4 * count
        if offset + nbytes > len(data):
            raise CorruptionError(
                f"payload truncated: need {nbytes} bytes at offset {offset}, file has {len(data)}",
                offset=offset,
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)
        offset += nbytes
        return arr

    frames = [take(m["frames"] * frame_size).reshape((m["frames"],) + dims) for m in metas]
    states = [take(m["frames"] * 4).reshape(m["frames"], 4) for m in metas]
    actions = [take(m["frames"] * 2).reshape(m["frames"], 2) for m in metas]
    if offset != len(data):
        raise CorruptionError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)
    videos = [
        LabeledVideo(
            frames=f, frame_labels=np.array(m["labels"], dtype=np.int64), states=s, actions=a,
            task=TaskSpec.from_dict(m["task"]), order=tuple(m["order"]),
            target_positions=np.array(m["target_positions"], dtype=np.float32).reshape(-1, 2),
            task_id=m["task_id"], seed=m["seed"], meta=m.get("meta", {}),
        )
        for m, f, s, a in zip(metas, frames, states, actions)
    ]
    if with_manifest:
        manifest = header["manifest"]
        return videos, (DatasetManifest.from_dict(manifest) if manifest else None)
    return videos


def dataset_io(path, dataset=None, manifest=None):
    """Write ``dataset`` to ``path`` if given, else read it back."""
    if dataset is not None:
        return write_dataset(path, dataset, manifest)
    return read_dataset(path)


def group_by_task(videos):
    out = {}
    for v in videos:
        out.setdefault(v.task_id, []).append(v)
    return out
