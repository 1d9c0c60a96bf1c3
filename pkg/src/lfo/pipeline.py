"""Stage runner for the full experiment.

Every stage reads its inputs from, and writes its outputs to, one output
directory.  Binary artifacts are content addressed (``<name>-<sha12>.<ext>``)
and listed in ``index.json``; numeric results go to ``results/<stage>.json``
and every stage re-emits the report from whatever results exist.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from . import localizer as loc
from . import reward as rw
from . import rl
from .checkpoint import load_model, save_model
from .config import ExperimentConfig
from .data import TaskSpec
from .errors import ConfigError, DependencyError, LfoError
from .parallel import pmap
from .report import Curve, Report, Table, emit_report
from .taskgen import (DatasetManifest, frames_from_snippet_labels, generate_dataset, read_dataset,
                      sample_task_splits, write_dataset)

COMMANDS = ("gen-data", "meta-train", "localize", "train-reward", "train-policy", "evaluate",
            "reproduce-all")
# Rows of the RL comparison, in report order.
ARMS = ("gt_rewards", "maml_seg", "gt_seg", "single_demo", "unsegmented")
REWARD_ARMS = ARMS[1:]


class StageError(LfoError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


class Workspace:
    """Output directory with an artifact index."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "artifacts").mkdir(exist_ok=True)
        (self.root / "results").mkdir(exist_ok=True)
        self.index_path = self.root / "index.json"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.exists() else {}

    def _commit(self, name, tmp, ext, stage, seed):
        digest = hashlib.sha256(tmp.read_bytes()).hexdigest()
        final = self.root / "artifacts" / f"{name}-{digest[:12]}.{ext}"
        os.replace(tmp, final)
        old = self.index.get(name)
        if old and old["file"] != final.name:
            (self.root / "artifacts" / old["file"]).unlink(missing_ok=True)
        self.index[name] = {"file": final.name, "sha256": digest, "stage": stage, "seed": seed}
        self.index_path.write_text(json.dumps(self.index, indent=2, sort_keys=True) + "\n")
        return final

    def put_dataset(self, name, videos, stage, seed, manifest=None):
        tmp = self.root / "artifacts" / f".{name}.tmp"
        write_dataset(tmp, videos, manifest)
        return self._commit(name, tmp, "lfod", stage, seed)

    def put_model(self, name, model, stage, seed):
        tmp = self.root / "artifacts" / f".{name}.tmp"
        save_model(tmp, model)
        return self._commit(name, tmp, "lfom", stage, seed)

    def path(self, name, needed_by):
        entry = self.index.get(name)
        if entry is None or not (self.root / "artifacts" / entry["file"]).exists():
            raise DependencyError(f"{needed_by} needs artifact '{name}', which is absent from {self.root}")
        return self.root / "artifacts" / entry["file"]

    def dataset(self, name, needed_by):
        return read_dataset(self.path(name, needed_by))

    def model(self, name, needed_by, kind=None):
        return load_model(self.path(name, needed_by), kind)

    def put_results(self, stage, results):
        p = self.root / "results" / f"{stage}.json"
        p.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")

    def results(self):
        out = {}
        for p in sorted((self.root / "results").glob("*.json")):
            out[p.stem] = json.loads(p.read_text())
        return out


def target_task(config):
    data = config.data
    colors = sorted(data.train_colors)
    chosen = tuple(data.target_task)
    rest = [c for c in colors if c not in chosen]
    return TaskSpec(chosen, tuple(rest[:max(0, config.env.n_targets - len(chosen))]))


# -- stages ------------------------------------------------------------------

def gen_data(config, ws, log=print):
    d, env = config.data, config.env
    train_tasks, meta_tasks = sample_task_splits(d.train_colors, d.meta_colors, d.K, env.n_targets)
    task = target_task(config)
    aux_env = replace(env, episode_length=max(env.episode_length, 200))
    plan = [
        ("train", DatasetManifest("train", train_tasks, d.train_videos, config.stage_seed("train_data"), env)),
        ("validation", DatasetManifest("validation", train_tasks, d.validation_videos,
                                       config.stage_seed("validation_data"), env)),
        ("meta_test", DatasetManifest("meta_test", meta_tasks, d.meta_test_videos,
                                      config.stage_seed("meta_test_data"), env)),
        ("auxiliary", DatasetManifest("auxiliary", [task], d.auxiliary_videos,
                                      config.stage_seed("auxiliary_data"), aux_env)),
        ("demo", DatasetManifest("auxiliary", [task], 1, config.stage_seed("demo"), aux_env)),
        ("heldout", DatasetManifest("auxiliary", [task], d.heldout_videos, config.stage_seed("heldout"),
                                    aux_env)),
    ]
    counts = {}
    for name, manifest in plan:
        videos = generate_dataset(manifest)
        ws.put_dataset(name, videos, "gen-data", manifest.seed, manifest)
        counts[name] = len(videos)
        log(f"gen-data: {name}: {len(videos)} videos")
    ws.put_results("gen_data", {"videos": counts})


def meta_train_stage(config, ws, log=print):
    train = ws.dataset("train", "meta-train")
    norm = loc.Normalization.fit(train)
    lcfg = replace(config.localizer, seed=config.stage_seed("localizer"))
    meta = loc.meta_train(train, lcfg, norm)
    ws.put_model("localizer", meta, "meta-train", lcfg.seed)
    bcfg = replace(config.baseline, seed=config.stage_seed("baseline"))
    base = loc.baseline_train(train, config.data.train_colors, bcfg, norm)
    ws.put_model("baseline", base, "meta-train", bcfg.seed)
    log(f"meta-train: {lcfg.mode}, {lcfg.iters} iterations")


def localize_stage(config, ws, log=print):
    meta = ws.model("localizer", "localize", "localizer")
    base = ws.model("baseline", "localize", "localizer")
    demo = ws.dataset("demo", "localize")[0]
    aux = ws.dataset("auxiliary", "localize")
    S = meta.snippet
    rows = {}
    for split in ("validation", "meta_test"):
        videos = ws.dataset(split, "localize")
        m = loc.evaluate_split(videos, lambda dv, f: loc.localize_with_demo(meta, dv, f,
                                                                           config.pipeline.threshold), S)
        b = loc.evaluate_split(videos, lambda dv, f: loc.baseline_with_demo(base, dv, f), S)
        rows[split] = {"meta": list(m), "baseline": list(b)}
        log(f"localize: {split}: mIoU meta {m[0]:.3f} baseline {b[0]:.3f}")
    theta = loc.inner_finetune(meta, demo)
    labeled, mious = [], []
    for v in aux:
        res = loc.localize(meta.spec, theta, v.frames, meta.normalization, S, config.pipeline.threshold)
        labeled.append(v.with_labels(frames_from_snippet_labels(res.labels, len(v), S)))
        gt = loc.majority_labels(v.frame_labels, S)
        mious.append(loc.localization_metrics(gt, res.labels, v.K).miou)
    ws.put_dataset("auxiliary_maml", labeled, "localize", config.stage_seed("localizer"))
    rows["auxiliary_miou"] = float(np.mean(mious))
    log(f"localize: auxiliary videos relabeled, mIoU {rows['auxiliary_miou']:.3f}")
    ws.put_results("localize", rows)


def _order_pairs(arm, k, aux, maml, demo, n, cfg, seed):
    kw = dict(min_gap=cfg.min_gap, max_gap=cfg.max_gap, seed=seed, flip_prob=cfg.flip_prob)
    if arm == "gt_seg":
        return rw.sample_order_pairs(aux, k, n, **kw)
    if arm == "maml_seg":
        return rw.sample_order_pairs(aux, k, n, labels=[v.frame_labels for v in maml], **kw)
    if arm == "single_demo":
        return rw.sample_order_pairs([demo], k, n, **kw)
    # one model over whole videos, shared by every subtask
    return rw.sample_order_pairs(aux, 0, n, labels=[np.zeros(len(v), np.int64) for v in aux], **kw)


def _train_one_reward(job):
    arm, k, aux, maml, demo, cfg, norm = job
    pairs = _order_pairs(arm, k, aux, maml, demo, cfg.n_pairs, cfg, cfg.seed + 1)
    return rw.train_reward(pairs, cfg, norm, subtask_id=k)


def spearman_progress(model, clips):
    """Mean Spearman correlation between the progress curve and time."""
    rhos = []
    for clip in clips:
        curve = rw.progress_curve(model, clip)
        rho = spearmanr(np.arange(curve.size), curve).statistic
        rhos.append(0.0 if np.isnan(rho) else float(rho))
    return float(np.mean(rhos))


def subtask_clips(videos, k):
    return [v.frames[v.frame_labels == k] for v in videos if np.sum(v.frame_labels == k) >= 2]


def train_reward_stage(config, ws, log=print):
    aux = ws.dataset("auxiliary", "train-reward")
    maml = ws.dataset("auxiliary_maml", "train-reward")
    demo = ws.dataset("demo", "train-reward")[0]
    heldout = ws.dataset("heldout", "train-reward")
    task = target_task(config)
    norm = loc.Normalization.fit(aux)
    cfg = replace(config.reward, seed=config.stage_seed("reward"))
    jobs = [(arm, k, aux, maml, demo, cfg, norm) for arm in REWARD_ARMS for k in range(task.K)
            if arm != "unsegmented" or k == 0]
    models = pmap(_train_one_reward, jobs)
    spear, curves = {}, {}
    for (arm, k, *_), model in zip(jobs, models):
        ws.put_model(f"reward_{arm}_{k}", model, "train-reward", cfg.seed)
    for arm in REWARD_ARMS:
        spear[arm] = []
        for k in range(task.K):
            model = load_model(ws.path(_reward_name(arm, k), "train-reward"), "reward")
            clips = subtask_clips(heldout, k)
            spear[arm].append(spearman_progress(model, clips))
            curves.setdefault(str(k), {})[arm] = [float(x) for x in rw.progress_curve(model, clips[0])]
        log(f"train-reward: {arm}: spearman {np.round(spear[arm], 3).tolist()}")
    ws.put_results("train_reward", {"spearman": spear, "progress": curves})


def _reward_name(arm, k):
    return f"reward_{arm}_{0 if arm == 'unsegmented' else k}"


def _train_one_policy(job):
    arm, k, env, task, source, rcfg = job
    return rl.train_policy(env, task, k, source, rcfg)


def policy_subtasks(config, task):
    ks = sorted(set(config.pipeline.policy_subtasks))
    if not ks or ks[0] < 0 or ks[-1] >= task.K:
        raise ConfigError(f"policy_subtasks must be a non-empty subset of 0..{task.K - 1}")
    return ks


def train_policy_stage(config, ws, log=print):
    task = target_task(config)
    jobs = []
    for arm in ARMS:
        for k in policy_subtasks(config, task):
            if arm == "gt_rewards":
                source = "ground_truth_dense"
            else:
                source = ws.model(_reward_name(arm, k), "train-policy", "reward")
            rcfg = replace(config.rl, seed=config.stage_seed("policy") + k)
            jobs.append((arm, k, config.env, task, source, rcfg))
    outs = pmap(_train_one_policy, jobs)
    curves = {}
    for (arm, k, *_), (policy, curve) in zip(jobs, outs):
        ws.put_model(f"policy_{arm}_{k}", policy, "train-policy", config.stage_seed("policy") + k)
        curves.setdefault(str(k), {})[arm] = [float(c) for c in curve]
        log(f"train-policy: {arm} subtask {k}: final probe success {curve[-1]:.2f}")
    ws.put_results("train_policy", {"curves": curves})


def evaluate_stage(config, ws, log=print):
    task = target_task(config)
    demo = ws.dataset("demo", "evaluate")[0]
    seed = config.stage_seed("evaluate")
    n = config.pipeline.trials
    ks = policy_subtasks(config, task)
    rows = {}
    for arm in ARMS:
        pols = {k: ws.model(f"policy_{arm}_{k}", "evaluate", "policy") for k in ks}
        per = [float(rl.evaluate_policy(pols[k], config.env, task, k, n, seed)) for k in ks]
        rows[arm] = {"subtask_ids": ks, "subtasks": per}
        if len(ks) == task.K:
            # the full sequence is only defined once every subtask has a policy
            ordered = [pols[task.target_colors.index(c)] for c in demo.order]
            _, rows[arm]["sequence"] = rl.execute_sequence(ordered, config.env, task, demo.order, n, seed)
        log(f"evaluate: {arm}: subtasks {per} sequence {rows[arm].get('sequence', 'n/a')}")
    ws.put_results("evaluate", rows)


STAGES = {
    "gen-data": gen_data,
    "meta-train": meta_train_stage,
    "localize": localize_stage,
    "train-reward": train_reward_stage,
    "train-policy": train_policy_stage,
    "evaluate": evaluate_stage,
}


# -- report ------------------------------------------------------------------

def build_report(config, ws):
    res = ws.results()
    rep = Report(metadata={"config_sha256": config.fingerprint(),
                           "artifacts": {k: v["sha256"] for k, v in sorted(ws.index.items())}})
    if "localize" in res:
        r = res["localize"]
        sl, sb = config.stage_seed("localizer"), config.stage_seed("baseline")
        rep.tables["localization"] = Table(
            ["validation_miou", "meta_test_miou", "validation_accuracy", "meta_test_accuracy"],
            [[r["validation"][m][0], r["meta_test"][m][0], r["validation"][m][1], r["meta_test"][m][1]]
             for m in ("meta", "baseline")],
            row_labels=[config.localizer.mode, "baseline"],
            tags=[("localize", sl), ("localize", sb)],
        )
    if "train_reward" in res:
        sp = res["train_reward"]["spearman"]
        arms = [a for a in REWARD_ARMS if a in sp]
        K = len(sp[arms[0]])
        rep.tables["reward_spearman"] = Table(
            [f"subtask_{k}" for k in range(K)], [sp[a] for a in arms], row_labels=arms,
            tags=[("train-reward", config.stage_seed("reward"))] * len(arms))
        for k, series in sorted(res["train_reward"]["progress"].items()):
            series = {a: series[a] for a in REWARD_ARMS if a in series}
            length = len(next(iter(series.values())))
            rep.curves[f"progress_subtask_{k}"] = Curve(
                list(range(1, length + 1)), series, "frame", "accumulated reward",
                ("train-reward", config.stage_seed("reward")))
    if "train_policy" in res:
        for k, series in sorted(res["train_policy"]["curves"].items()):
            series = {a: series[a] for a in ARMS if a in series}
            length = len(next(iter(series.values())))
            rep.curves[f"policy_success_subtask_{k}"] = Curve(
                list(range(length)), series, "PPO iteration", "probe success rate",
                ("train-policy", config.stage_seed("policy") + int(k)))
    if "evaluate" in res:
        ev = res["evaluate"]
        arms = [a for a in ARMS if a in ev]
        ks = ev[arms[0]]["subtask_ids"]
        seq = all("sequence" in ev[a] for a in arms)
        rep.tables["rl_success"] = Table(
            [f"subtask_{k}" for k in ks] + (["sequence"] if seq else []),
            [ev[a]["subtasks"] + ([ev[a]["sequence"]] if seq else []) for a in arms], row_labels=arms,
            tags=[("evaluate", config.stage_seed("evaluate"))] * len(arms))
    return rep


def write_report(config, ws, started=None):
    rep = build_report(config, ws)
    if rep.is_empty():
        return []
    paths = emit_report(rep, ws.root / "report")
    meta = dict(rep.metadata)
    meta.update({"lfo_version": __version__, "numpy": np.__version__, "python": platform.python_version()})
    if started is not None:
        meta["wall_clock_seconds"] = round(time.time() - started, 3)
    (ws.root / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def run_stage(command, config: ExperimentConfig, out_dir, log=print):
    """Run one CLI command; ``reproduce-all`` chains every stage."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    started = time.time()
    ws = Workspace(out_dir)
    (ws.root / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    names = list(STAGES) if command == "reproduce-all" else [command]
    for name in names:
        try:
            STAGES[name](config, ws, log)
        except DependencyError:
            raise
        except LfoError as exc:
            raise StageError(name, exc) from exc
    return write_report(config, ws, started)
