"""Task and video records shared by the simulator, dataset and learning stages."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NONE = -1  # "none of the above" label


@dataclass(frozen=True)
class TaskSpec:
    target_colors: tuple
    distractor_colors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "target_colors", tuple(int(c) for c in self.target_colors))
        object.__setattr__(self, "distractor_colors", tuple(int(c) for c in self.distractor_colors))
        if len(set(self.target_colors)) != len(self.target_colors):
            raise ValueError(f"duplicate target colors {self.target_colors}")
        if set(self.target_colors) & set(self.distractor_colors):
            raise ValueError("target and distractor colors overlap")

    @property
    def K(self):
        return len(self.target_colors)

    @property
    def scene_colors(self):
        return tuple(sorted(self.target_colors + self.distractor_colors))

    def to_dict(self):
        return {"target_colors": list(self.target_colors),
                "distractor_colors": list(self.distractor_colors)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["target_colors"], d["distractor_colors"])


@dataclass
class LabeledVideo:
    """One rollout: frames plus per-frame labels, arm states and actions.

    ``frames`` is ``(T, H, W, 3)`` float32, ``states`` is ``(T, 4)`` float32
    (joint angles then joint velocities), ``actions`` is ``(T, 2)`` float32.
    Labels index into ``task.target_colors``; ``NONE`` marks unmatched frames.
    """
    frames: np.ndarray
    frame_labels: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    task: TaskSpec
    order: tuple
    target_positions: np.ndarray  # (n_targets, 2), rows follow task.scene_colors
    task_id: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def K(self):
        return self.task.K

    def snippet_labels(self, S):
        from .taskgen import majority_labels
        return majority_labels(self.frame_labels, S)

    def with_labels(self, frame_labels):
        return LabeledVideo(self.frames, np.asarray(frame_labels, dtype=np.int64), self.states,
                            self.actions, self.task, self.order, self.target_positions,
                            self.task_id, self.seed, dict(self.meta))
