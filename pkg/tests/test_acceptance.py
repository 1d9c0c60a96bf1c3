"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The desk-scale pipeline runs once per session (master seed 0, reference mode) and is
shared by criteria 3, 5, 6, 7 and 8; criterion 3 adds master seeds 1 and 2.
"""
import dataclasses
import hashlib
import json

import numpy as np
import pytest

from lfo import cli
from lfo import diffnet as dn
from lfo import localizer as loc
from lfo import reward as rw
from lfo.checkpoint import load_model, save_model
from lfo.config import ExperimentConfig, PipelineConfig
from lfo.parallel import set_reference
from lfo.pipeline import Workspace, run_stage
from lfo.taskgen import read_dataset, write_dataset

from test_diffnet import composed_objective_fd, grads_agree, half_square_batch, random_case
from test_localizer import oracle_metrics
from test_pipeline import TINY

pytestmark = pytest.mark.acceptance

LOCALIZE_STAGES = ("gen-data", "meta-train", "localize")
ALL_STAGES = LOCALIZE_STAGES + ("train-reward", "train-policy", "evaluate")


def desk_config(seed):
    # criterion 6 is judged per subtask on the first demonstrated subtask
    return dataclasses.replace(ExperimentConfig(seed=seed), pipeline=PipelineConfig(policy_subtasks=(0,)))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    set_reference(True)
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for seed in (0, 1, 2):
        out = root / f"seed{seed}"
        for stage in (ALL_STAGES if seed == 0 else LOCALIZE_STAGES):
            run_stage(stage, desk_config(seed), out, log=lambda *a: None)
        runs[seed] = Workspace(out)
    return runs


def test_criterion_1_gradients(verdict):
    worst = 0.0
    ok = True
    for kind in dn.LOSS_KINDS:
        rng = np.random.default_rng([1, dn.LOSS_KINDS.index(kind)])
        for i in range(20):
            spec, theta, batch = random_case(rng, kind, "tanh" if i % 2 else "relu", 1 + i % 3)
            _, g = dn.loss_and_grad(spec, theta, batch)
            fd = dn.finite_diff_grad(spec, theta, batch)
            ok &= grads_agree(g, fd, rel=1e-4, abs_tol=1e-6)
            worst = max(worst, float(np.max(np.abs(g - fd) / (np.abs(g) + 1e-6))))
    assert verdict(1, ok, f"60 cases, worst scaled error {worst:.2e}")


def test_criterion_2_meta_gradient(verdict):
    spec = dn.NetSpec((1, 1))
    b = half_square_batch()
    exact = dn.meta_grad_maml(spec, np.array([1.0, 0.0]), b, b, 0.1)[1][0]
    first = dn.meta_grad_maml(spec, np.array([1.0, 0.0]), b, b, 0.1, first_order=True)[1][0]
    closed = abs(exact - 0.81) <= 1e-10 and abs(first - 0.9) <= 1e-10
    rng = np.random.default_rng(2)
    fd_ok = True
    for _ in range(5):
        spec = dn.NetSpec((3, 5, 4, 2), ("tanh", "linear"))
        theta = rng.normal(scale=0.7, size=dn.param_count(spec))
        support = dn.Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, 6), "softmax_ce")
        query = dn.Batch(rng.normal(size=(5, 3)), rng.integers(0, 2, 5), "softmax_ce")
        meta = dn.meta_grad_maml(spec, theta, support, query, 0.3)[1]
        fd_ok &= grads_agree(meta, composed_objective_fd(spec, theta, support, query, 0.3), rel=1e-3)
    assert verdict(2, closed and fd_ok, f"exact {exact:.12f} first-order {first:.12f}; random nets vs FD ok={fd_ok}")


def test_criterion_3_localization(desk, verdict):
    rows = [ws.results()["localize"] for ws in desk.values()]
    mean = lambda split, model: float(np.mean([r[split][model][0] for r in rows]))
    gap_v = mean("validation", "meta") - mean("validation", "baseline")
    gap_m = mean("meta_test", "meta") - mean("meta_test", "baseline")
    ok = gap_v >= 0.10 and gap_m >= 0.10 and mean("meta_test", "meta") >= 0.5
    detail = (f"mIoU meta/baseline validation {mean('validation', 'meta'):.3f}/{mean('validation', 'baseline'):.3f}"
              f" meta-test {mean('meta_test', 'meta'):.3f}/{mean('meta_test', 'baseline'):.3f}"
              f" gaps {gap_v:.3f} {gap_m:.3f} (3 seeds)")
    assert verdict(3, ok, detail)


def test_criterion_4_telescoping(verdict):
    ident = loc.Normalization.identity()
    ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = rw.new_reward_model(48, ident, seed, hidden=8, embed=4)
        m.embed_params = rng.normal(size=m.embed_params.size).astype(np.float32)
        m.pred_params = rng.normal(size=m.pred_params.size).astype(np.float32)
        frames = rng.random((int(rng.integers(2, 12)), 4, 4, 3)).astype(np.float32)
        running, total = [], 0.0
        for t in range(len(frames) - 1):
            total += rw.step_reward(m, frames[0], frames[t], frames[t + 1])
            running.append(total)
        curve = rw.progress_curve(m, frames)
        ok &= curve.tobytes() == np.array(running).tobytes()
        ok &= abs(curve[-1] - (rw.g_eval(m, frames[0], frames[-1]) - rw.g_eval(m, frames[0], frames[0]))) <= 1e-6
        a, b = frames[rng.integers(len(frames))], frames[rng.integers(len(frames))]
        ok &= rw.step_reward(m, frames[0], a, b) == -rw.step_reward(m, frames[0], b, a)
    assert verdict(4, ok, "100 random models and clips")


def test_criterion_5_reward_monotonicity(desk, verdict):
    sp = desk[0].results()["train_reward"]["spearman"]
    seg_ok = all(r >= 0.8 for r in sp["gt_seg"])
    unseg_fails = any(r < 0.8 for r in sp["unsegmented"])
    detail = f"gt_seg spearman {np.round(sp['gt_seg'], 3).tolist()} unsegmented {np.round(sp['unsegmented'], 3).tolist()}"
    assert verdict(5, seg_ok and unseg_fails, detail)


def test_criterion_6_rl_ordering(desk, verdict):
    ev = desk[0].results()["evaluate"]
    rate = {arm: r["subtasks"][0] for arm, r in ev.items()}
    checks = {
        "gt_rewards>=0.85": rate["gt_rewards"] >= 0.85,
        "gt_seg>=0.5": rate["gt_seg"] >= 0.5,
        "maml_seg>=0.5": rate["maml_seg"] >= 0.5,
        "single_demo<=0.3": rate["single_demo"] <= 0.3,
        "unsegmented<=0.1": rate["unsegmented"] <= 0.1,
        "gt_seg-unseg>=0.3": rate["gt_seg"] - rate["unsegmented"] >= 0.3,
        "maml_seg-unseg>=0.3": rate["maml_seg"] - rate["unsegmented"] >= 0.3,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = " ".join(f"{a} {r:.2f}" for a, r in rate.items()) + (f"; failed: {failed}" if failed else "")
    assert verdict(6, not failed, detail)


def test_criterion_7_noise_robustness(desk, verdict):
    ws = desk[0]
    aux, held = ws.dataset("auxiliary", "test"), ws.dataset("heldout", "test")
    cfg = ExperimentConfig().reward
    norm = loc.Normalization.fit(aux)
    drops = []
    for k in (0, 1):
        test_pairs = rw.sample_order_pairs(held, k, 2000, min_gap=cfg.min_gap, seed=99)
        acc = []
        for flip in (0.0, 0.15):
            pairs = rw.sample_order_pairs(aux, k, cfg.n_pairs, min_gap=cfg.min_gap, max_gap=cfg.max_gap,
                                          seed=7, flip_prob=flip)
            acc.append(rw.pair_accuracy(rw.train_reward(pairs, dataclasses.replace(cfg, seed=5), norm), test_pairs))
        drops.append((acc[0], acc[1]))
    ok = all(c - n <= 0.15 for c, n in drops)
    detail = " ".join(f"subtask {k}: clean {c:.3f} noisy {n:.3f}" for k, (c, n) in enumerate(drops))
    assert verdict(7, ok, detail)


def test_criterion_8_determinism(desk, tmp_path, verdict):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["reproduce-all", "--config", str(cfg), "--out", str(out), "--reference", "--quiet"]) == 0
        reports.append({p.name: p.read_bytes() for p in sorted((out / "report").glob("*.csv"))})
    same_reports = reports[0] == reports[1] and len(reports[0]) > 0
    ws = desk[0]
    lossless = True
    for name, entry in ws.index.items():
        src = ws.path(name, "test")
        copy = tmp_path / f"copy{src.suffix}"
        if src.suffix == ".lfod":
            videos, manifest = read_dataset(src, with_manifest=True)
            write_dataset(copy, videos, manifest)
        else:
            save_model(copy, load_model(src))
        lossless &= hashlib.sha256(copy.read_bytes()).hexdigest() == entry["sha256"]
    detail = f"{len(reports[0])} report CSVs identical={same_reports}; {len(ws.index)} artifacts re-serialized bitwise={lossless}"
    assert verdict(8, same_reports and lossless, detail)


def test_criterion_9_metric_oracle(verdict):
    rng = np.random.default_rng(9)
    ok = True
    for _ in range(1000):
        K = int(rng.integers(1, 5))
        n = int(rng.integers(1, 40))
        gt, pred = rng.integers(0, K, n), rng.integers(-1, K, n)
        m = loc.localization_metrics(gt, pred, K)
        ok &= (m.accuracy, m.miou) == oracle_metrics(gt, pred, K)
    assert verdict(9, ok, "1000 random label arrays, exact equality")
