"""Meta-train a localizer, then segment an unseen-color video from a single demonstration.

Run: python demos/one_shot_localization.py   (about ten seconds on one core)
"""
import numpy as np

from lfo import localizer as loc
from lfo.taskgen import DatasetManifest, generate_dataset, majority_labels, sample_task_splits

train_tasks, meta_tasks = sample_task_splits([0, 1, 2, 3], [4, 5, 6, 7], 2)
train = generate_dataset(DatasetManifest("train", train_tasks, 10, 1))
unseen = generate_dataset(DatasetManifest("meta_test", meta_tasks[:1], 2, 3))

model = loc.meta_train(train, loc.LocalizerConfig(seed=0),
                       progress=lambda i, loss: print(f"iter {i:4d}  query loss {loss:.3f}") if i % 50 == 0 else None)

demo, target = unseen
print(f"\ndemo order {demo.order}, target order {target.order} (colors never seen in training)")
result = loc.localize_with_demo(model, demo, target.frames)
truth = majority_labels(target.frame_labels, model.snippet)
metrics = loc.localization_metrics(truth, result.labels, target.K)
print("ground truth:", "".join(map(str, truth)))
print("predicted:   ", "".join(map(str, result.labels)))
print(f"mIoU {metrics.miou:.3f}  accuracy {metrics.accuracy:.3f}  per-class IoU {np.round(metrics.per_class_iou, 3)}")
