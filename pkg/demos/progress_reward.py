"""Train an order-prediction reward on expert clips of one subtask and print its progress curve.

Run: python demos/progress_reward.py   (a few seconds on one core)
"""
import numpy as np

from lfo import reward as rw
from lfo.data import TaskSpec
from lfo.localizer import Normalization
from lfo.reacher import EnvConfig
from lfo.taskgen import DatasetManifest, generate_dataset

env = EnvConfig(episode_length=200)
task = TaskSpec((0, 1), (2, 3))
videos = generate_dataset(DatasetManifest("auxiliary", [task], 40, 11, env))
held = generate_dataset(DatasetManifest("auxiliary", [task], 3, 12, env))

pairs = rw.sample_order_pairs(videos, 0, 4000, seed=1)
model = rw.train_reward(pairs, rw.RewardConfig(seed=3), Normalization.fit(videos), subtask_id=0)
print(f"final training loss {model.final_loss:.3f}")

for v in held:
    clip = v.frames[v.frame_labels == 0]
    curve = rw.progress_curve(model, clip)
    marks = np.linspace(0, len(curve) - 1, 8).astype(int)
    print("accumulated reward:", " ".join(f"{curve[i]:+.2f}" for i in marks))
