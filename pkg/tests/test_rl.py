from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfo import diffnet as dn
from lfo import reacher as rc
from lfo import rl
from lfo.data import TaskSpec
from lfo.errors import DataError, ShapeError

CFG = rc.EnvConfig()
TASK = TaskSpec((0, 1), (2, 3))


# -- gae -------------------------------------------------------------------------

def test_gae_examples():
    assert rl.gae([1.0], [0.0, 0.0], 1.0, 1.0).tolist() == [1.0]
    assert np.all(rl.gae(np.zeros(5), np.zeros(6), 0.99, 0.95) == 0)
    assert rl.gae([1.0, 2.0], [0.5, 0.5, 0.0], 0.0, 0.95).tolist() == [0.5, 1.5]


def test_gae_length_mismatch():
    with pytest.raises(ShapeError):
        rl.gae([1.0, 2.0], [0.0, 0.0], 0.9, 0.9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_gae_reduces_to_reverse_cumsum(rewards):
    adv = rl.gae(rewards, np.zeros(len(rewards) + 1), 1.0, 1.0)
    oracle = [sum(rewards[t:]) for t in range(len(rewards))]
    assert np.allclose(adv, oracle, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=20), st.floats(0.01, 100.0))
def test_advantage_normalization_scale_invariant(rewards, c):
    r = np.array(rewards)
    if r.std() < 1e-3:
        return
    a = rl.normalize_advantages(rl.gae(r, np.zeros(len(r) + 1), 0.99, 0.95))
    b = rl.normalize_advantages(rl.gae(c * r, np.zeros(len(r) + 1), 0.99, 0.95))
    assert np.allclose(a, b, atol=1e-6)


def test_normalized_advantages_moments():
    a = rl.normalize_advantages(np.random.default_rng(0).normal(3, 2, 500))
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1) < 1e-12
    assert np.all(rl.normalize_advantages(np.ones(4)) == 0)


# -- surrogate ---------------------------------------------------------------------

def test_surrogate_examples():
    assert rl.ppo_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert rl.ppo_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    for A in (-3.0, 0.0, 2.5):
        assert rl.ppo_surrogate(1.0, A, 0.2) == A


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.0, 3.0), st.floats(-5, 5), st.floats(0.05, 0.5))
def test_surrogate_nonincreasing_beyond_clip(r, extra, A, eps):
    # moving |r - 1| outward past the boundary never increases the objective
    hi = 1 + eps + r
    assert rl.ppo_surrogate(hi + extra, A, eps) <= rl.ppo_surrogate(hi, A, eps) + 1e-12
    lo = max(1e-6, 1 - eps - r * 0.1)
    lower = max(1e-6, lo - extra)
    assert rl.ppo_surrogate(lower, A, eps) <= rl.ppo_surrogate(lo, A, eps) + 1e-12


# -- ppo update -----------------------------------------------------------------------

def random_batch(n=128, seed=0, width=rl.obs_width(4), adv=None):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, width))
    acts = rng.normal(size=(n, 2))
    A = rng.normal(size=n) if adv is None else adv
    return rl.RolloutBatch(obs, acts, rng.normal(size=n) - 2, A, rng.normal(size=n))


def test_zero_epochs_unchanged():
    pol = rl.new_policy(4, 0)
    out, _ = rl.ppo_update(pol, random_batch(), rl.PPOConfig(epochs=0))
    assert out.mean_params is pol.mean_params and np.array_equal(out.log_std, pol.log_std)


def test_zero_advantages_leave_mean_net():
    pol = rl.new_policy(4, 1)
    batch = random_batch(adv=np.zeros(128))
    out, _ = rl.ppo_update(pol, batch, rl.PPOConfig(value_coef=0.0, entropy_coef=0.0))
    assert np.array_equal(out.mean_params, pol.mean_params)
    assert np.allclose(out.log_std, pol.log_std, atol=1e-7)


def test_ppo_update_deterministic():
    pol = rl.new_policy(4, 2)
    a, _ = rl.ppo_update(pol, random_batch(seed=3), rl.PPOConfig(seed=5))
    b, _ = rl.ppo_update(pol, random_batch(seed=3), rl.PPOConfig(seed=5))
    assert a.mean_params.tobytes() == b.mean_params.tobytes()
    assert a.value_params.tobytes() == b.value_params.tobytes()


def test_ppo_empty_batch():
    with pytest.raises(DataError):
        rl.ppo_update(rl.new_policy(4, 0), random_batch(n=0), rl.PPOConfig())


def test_ppo_gradient_matches_finite_difference():
    pol = rl.new_policy(1, 4, hidden=6)
    pol.log_std = np.array([-0.3, 0.2])
    batch = random_batch(n=16, seed=6, width=rl.obs_width(1))
    mu = pol.mean(batch.obs)
    # ratios near 1 keep every sample in the unclipped region
    batch.log_probs = rl.log_prob(mu, pol.log_std, batch.actions) + 0.01
    cfg = rl.PPOConfig(entropy_coef=0.05, value_coef=0.7)
    _, g_m, g_l, g_v = rl._ppo_grads(pol, batch, cfg)

    def loss(mp, ls, vp):
        return rl._ppo_grads(replace(pol, mean_params=mp, log_std=ls, value_params=vp), batch, cfg)[0]

    mp = pol.mean_params.astype(np.float64)
    h = 1e-5
    for i in np.random.default_rng(0).choice(mp.size, 10, replace=False):
        e = np.zeros_like(mp); e[i] = h
        fd = (loss(mp + e, pol.log_std, pol.value_params) - loss(mp - e, pol.log_std, pol.value_params)) / (2 * h)
        assert abs(fd - g_m[i]) <= 1e-4 * abs(fd) + 1e-7
    for i in range(2):
        e = np.zeros(2); e[i] = h
        fd = (loss(mp, pol.log_std + e, pol.value_params) - loss(mp, pol.log_std - e, pol.value_params)) / (2 * h)
        assert abs(fd - g_l[i]) <= 1e-4 * abs(fd) + 1e-7
    vp = pol.value_params.astype(np.float64)
    for i in range(0, vp.size, 17):
        e = np.zeros_like(vp); e[i] = h
        fd = (loss(mp, pol.log_std, vp + e) - loss(mp, pol.log_std, vp - e)) / (2 * h)
        assert abs(fd - g_v[i]) <= 1e-4 * abs(fd) + 1e-7


def test_bandit_drives_action_to_zero():
    """One-step bandit with reward -u^2, starting from a mean action near 0.8."""
    pol = rl.new_policy(1, 0, hidden=16)
    pol.mean_params[-2:] = 0.8
    rng = np.random.default_rng(0)
    obs = np.zeros((64, rl.obs_width(1)))
    cfg = rl.PPOConfig(lr=1e-2, minibatch=64, entropy_coef=0.0)
    opt = None
    for it in range(50):
        u = pol.act(obs, rng)
        r = -np.sum(u * u, axis=1)
        lp = rl.log_prob(pol.mean(obs), pol.log_std, u)
        batch = rl.RolloutBatch(obs, u, lp, rl.normalize_advantages(r - pol.value(obs)), r)
        pol, opt = rl.ppo_update(pol, batch, replace(cfg, seed=it), opt)
    assert np.abs(pol.mean(obs[:1])).max() < 0.1


# -- behavioral cloning ----------------------------------------------------------------

@pytest.fixture(scope="module")
def demos():
    vids = [rc.rollout_expert(CFG, TASK, (0, 1), seed=s) for s in range(25)]
    return rl.demo_pairs(vids[:20], CFG, 0), rl.demo_pairs(vids[20:], CFG, 0)


def test_bc_zero_steps_unchanged(demos):
    (obs, act), _ = demos
    pol = rl.new_policy(4, 0)
    out = rl.bc_pretrain(pol, obs, act, rl.BCConfig(steps=0))
    assert np.array_equal(out.mean_params, pol.mean_params)


def test_bc_reduces_heldout_mse_and_is_deterministic(demos):
    (obs, act), (hobs, hact) = demos
    pol = rl.new_policy(4, 0)
    cfg = rl.BCConfig(steps=300, seed=1)
    out = rl.bc_pretrain(pol, obs, act, cfg)
    assert rl.bc_mse(out, hobs, hact) < rl.bc_mse(pol, hobs, hact)
    assert np.array_equal(out.value_params, pol.value_params) and np.array_equal(out.log_std, pol.log_std)
    assert rl.bc_pretrain(pol, obs, act, cfg).mean_params.tobytes() == out.mean_params.tobytes()


def test_bc_empty_demo():
    with pytest.raises(DataError):
        rl.bc_pretrain(rl.new_policy(4, 0), np.zeros((0, 14)), np.zeros((0, 2)), rl.BCConfig())
    with pytest.raises(DataError):
        rl.demo_pairs([], CFG)


# -- observation and environment plumbing -------------------------------------------

def test_observation_roundtrip():
    rng = np.random.default_rng(0)
    ang = rng.uniform(-3, 3, (5, 2)); vel = rng.normal(0, 0.05, (5, 2)); pos = rng.uniform(-1, 1, (5, 4, 2))
    obs = rl.observe(ang, vel, pos)
    assert obs.shape == (5, rl.obs_width(4))
    a, v, p = rl.decode_observation(obs)
    assert np.allclose(a, ang) and np.allclose(v, vel) and np.allclose(p, pos)


def test_log_std_clamped():
    pol = rl.new_policy(4, 0, log_std=9.0)
    assert np.all(pol.log_std == rl.LOG_STD_MAX)


def test_ground_truth_reward_definition():
    ee = np.array([[[0.0, 0.0], [0.3, 0.4], [0.0, 0.0]]])
    pos = np.zeros((1, 1, 2))
    acts = np.array([[[3.0, 0.0], [0.5, 0.5]]])
    r = rl.ground_truth_reward(CFG, ee, pos, 0, acts)
    assert np.allclose(r, [[-0.5 - 0.01, -0.0 - 0.005]])


# -- evaluation and sequencing -----------------------------------------------------------

def test_expert_policy_success():
    expert = rl.ExpertPolicy(CFG, rl.target_slot(TASK, 0))
    assert rl.evaluate_policy(expert, CFG, TASK, 0, 100, 3) >= 0.95


def test_evaluate_deterministic_and_bounded():
    pol = rl.new_policy(4, 7)
    pol.mean_params[-2:] = 0.3
    a = rl.evaluate_policy(pol, CFG, TASK, 0, 1, 5)
    assert a == rl.evaluate_policy(pol, CFG, TASK, 0, 1, 5)
    rate = rl.evaluate_policy(pol, CFG, TASK, 1, 20, 5)
    assert 0.0 <= rate <= 1.0


def test_untrained_policy_rarely_succeeds():
    pol, curve = rl.train_policy(CFG, TASK, 0, "ground_truth_dense", rl.RLConfig(iterations=0))
    assert len(curve) == 1
    assert rl.evaluate_policy(pol, CFG, TASK, 0, 100, 1) <= 0.2


def test_sequence_with_experts():
    pols = [rl.ExpertPolicy(CFG, rl.target_slot(TASK, k)) for k in range(2)]
    per, overall = rl.execute_sequence(pols, CFG, TASK, (0, 1), 50, 2)
    assert overall >= 0.9
    assert overall <= min(per)


def test_sequence_blocked_first_stage():
    idle = rl.new_policy(4, 0)
    idle.mean_params[:] = 0
    per, overall = rl.execute_sequence([idle, rl.ExpertPolicy(CFG, 1)], CFG, TASK, (0, 1), 20, 2)
    assert per[0] == 0.0 and overall == 0.0


def test_sequence_needs_one_policy_per_subtask():
    with pytest.raises(ShapeError):
        rl.execute_sequence([rl.ExpertPolicy(CFG, 0)], CFG, TASK, (0, 1), 5, 0)


def test_rollout_trajectories_consistent():
    pol = rl.new_policy(4, 1)
    tr = rl.collect(pol, CFG, TASK, 0, "ground_truth_dense", 3, 0, np.random.default_rng(0))
    T = rl.T_SUB
    assert tr.obs.shape[:2] == tr.actions.shape[:2] == tr.rewards.shape == tr.log_probs.shape == (3, T)
    assert tr.values.shape == (3, T + 1) and tr.angles.shape == (3, T + 1, 2)
    assert np.all(np.isfinite(tr.rewards)) and np.all(tr.done[:, -1])


@pytest.mark.slow
def test_gt_reward_fixed_target_learns():
    """Fixed target position, dense ground-truth reward."""
    cfg = replace(CFG, home_jitter=0.0, home_radius=(0.7, 0.7))
    rlc = rl.RLConfig(iterations=150, seed=0)
    pol, curve = rl.train_policy(cfg, TASK, 0, "ground_truth_dense", rlc)
    assert rl.evaluate_policy(pol, cfg, TASK, 0, 100, 11) >= 0.9
