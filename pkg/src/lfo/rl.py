"""Subtask policies: Gaussian MLP policy, GAE, PPO, behavioral cloning, evaluation and sequencing.

Policy actions live in torque-limit units: the environment receives
``torque_limit * u``, clipped.  Rollouts are vectorised over a batch of
independent scenes; reward computation happens after the rollout because it
never feeds back into the dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffnet as dn
from . import reacher as rc
from .errors import DataError, NumericError, ShapeError
from .reward import anchored_scores

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
VEL_SCALE = 10.0
T_SUB = 60
_LOG_2PI = np.log(2 * np.pi)


def obs_width(n_targets):
    return 6 + 2 * n_targets


def observe(angles, velocities, positions):
    """``[sin, cos of both joints, scaled velocities, target positions by color]``."""
    angles = np.atleast_2d(angles)
    velocities = np.atleast_2d(velocities)
    positions = np.asarray(positions, dtype=np.float64)
    positions = positions.reshape(angles.shape[0], -1)
    return np.concatenate([np.sin(angles), np.cos(angles), VEL_SCALE * velocities, positions], axis=1)


def decode_observation(obs):
    angles = np.arctan2(obs[:, 0:2], obs[:, 2:4])
    return angles, obs[:, 4:6] / VEL_SCALE, obs[:, 6:].reshape(obs.shape[0], -1, 2)


# -- policy ------------------------------------------------------------------

@dataclass
class PolicyModel:
    mean_spec: dn.NetSpec
    mean_params: np.ndarray
    log_std: np.ndarray
    value_spec: dn.NetSpec
    value_params: np.ndarray
    slot: int = 0

    def __post_init__(self):
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        if self.mean_spec.n_out != 2 or self.value_spec.n_out != 1:
            raise ShapeError("policy heads must have widths 2 and 1")

    def mean(self, obs):
        return dn.forward(self.mean_spec, self.mean_params, obs)

    def value(self, obs):
        return dn.forward(self.value_spec, self.value_params, obs)[:, 0]

    def act(self, obs, rng=None):
        """Mean action when ``rng`` is None, else a Gaussian sample."""
        mu = self.mean(obs)
        if rng is None:
            return mu
        return mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)


def new_policy(n_targets, seed, slot=0, hidden=64, log_std=-0.7):
    w = obs_width(n_targets)
    ms = dn.mlp([w, hidden, hidden, 2])
    vs = dn.mlp([w, hidden, hidden, 1])
    params = dn.init_params(ms, seed)
    # small output layer so the initial policy is close to zero torque
    params[-(hidden * 2 + 2):] *= 0.01
    return PolicyModel(ms, params, np.full(2, log_std), vs, dn.init_params(vs, seed + 1), slot)


@dataclass
class ExpertPolicy:
    """Scripted PD controller wearing the policy interface."""
    config: rc.EnvConfig
    slot: int

    def act(self, obs, rng=None):
        angles, vel, pos = decode_observation(obs)
        goal = rc.ik_batch(self.config, pos[:, self.slot])
        return rc.expert_torque(self.config, angles, vel, goal) / self.config.torque_limit


def log_prob(mu, log_std, u):
    z = (u - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=1)


def entropy(log_std):
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


# -- advantage estimation and the PPO objective ------------------------------

def gae(rewards, values, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != rewards.shape[-1] + 1:
        raise ShapeError("values needs one bootstrap entry beyond rewards")
    deltas = rewards + gamma * values[..., 1:] - values[..., :-1]
    adv = np.zeros_like(deltas)
    running = np.zeros(deltas.shape[:-1])
    for t in range(deltas.shape[-1] - 1, -1, -1):
        running = deltas[..., t] + gamma * lam * running
        adv[..., t] = running
    return adv


def ppo_surrogate(ratio, advantage, clip_eps):
    ratio = np.asarray(ratio, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    out = np.minimum(ratio * advantage, clipped * advantage)
    return float(out) if out.ndim == 0 else out


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    lr: float = 1e-3
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    seed: int = 0


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


def _ppo_grads(policy, mb, cfg):
    mu, tm = dn.forward_trace(policy.mean_spec, policy.mean_params, mb.obs)
    v, tv = dn.forward_trace(policy.value_spec, policy.value_params, mb.obs)
    n = mu.shape[0]
    ls = policy.log_std
    lp = log_prob(mu, ls, mb.actions)
    ratio = np.exp(lp - mb.log_probs)
    A = mb.advantages
    surr = ppo_surrogate(ratio, A, cfg.clip_eps)
    vres = v[:, 0] - mb.returns
    loss = -surr.mean() + cfg.value_coef * np.mean(vres ** 2) - cfg.entropy_coef * entropy(ls)
    if not np.isfinite(loss):
        raise NumericError("non-finite PPO loss", index=int(np.flatnonzero(~np.isfinite(surr))[:1].sum()))
    # gradient flows through r*A only where the unclipped term is the active minimum
    active = ((A >= 0) & (ratio < 1 + cfg.clip_eps)) | ((A < 0) & (ratio > 1 - cfg.clip_eps))
    d_lp = -(active * ratio * A) / n
    inv_var = np.exp(-2 * ls)
    diff = mb.actions - mu
    g_mu = d_lp[:, None] * diff * inv_var
    g_ls = np.sum(d_lp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef
    g_mean, _ = dn.backprop(policy.mean_spec, tm, g_mu)
    g_val, _ = dn.backprop(policy.value_spec, tv, (2 * cfg.value_coef / n) * vres[:, None])
    return float(loss), g_mean, g_ls, g_val


def ppo_update(policy, batch, config, opt=None):
    """``epochs`` passes of Adam over shuffled minibatches.  Returns ``(policy, optimizer_states)``."""
    if len(batch) == 0:
        raise DataError("empty rollout batch")
    if opt is None:
        opt = (dn.adam(config.lr, policy.mean_params.size), dn.adam(config.lr, 2),
               dn.adam(config.lr, policy.value_params.size))
    om, ol, ov = opt
    mp, ls, vp = policy.mean_params, policy.log_std, policy.value_params
    rng = np.random.default_rng(config.seed)
    n = len(batch)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.minibatch):
            idx = perm[s:s + config.minibatch]
            mb = RolloutBatch(batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                              batch.advantages[idx], batch.returns[idx])
            cur = replace(policy, mean_params=mp, log_std=ls, value_params=vp)
            _, g_m, g_l, g_v = _ppo_grads(cur, mb, config)
            mp, om = dn.optimizer_step(om, mp, g_m)
            ls, ol = dn.optimizer_step(ol, ls, g_l)
            ls = np.clip(ls.astype(np.float64), LOG_STD_MIN, LOG_STD_MAX)
            vp, ov = dn.optimizer_step(ov, vp, g_v)
    return replace(policy, mean_params=mp, log_std=ls, value_params=vp), (om, ol, ov)


# -- behavioral cloning ------------------------------------------------------

@dataclass
class BCConfig:
    lr: float = 1e-3
    steps: int = 500
    batch: int = 64
    seed: int = 0


def demo_pairs(videos, config, subtask=None):
    """Observations and normalised expert actions from recorded demonstrations."""
    obs, act = [], []
    for v in videos:
        keep = np.ones(len(v), bool) if subtask is None else (v.frame_labels == subtask)
        if not keep.any():
            continue
        pos = np.broadcast_to(v.target_positions.reshape(1, -1), (int(keep.sum()), v.target_positions.size))
        obs.append(observe(v.states[keep, :2], v.states[keep, 2:], pos))
        act.append(v.actions[keep] / config.torque_limit)
    if not obs:
        raise DataError("no demonstration state-action pairs")
    return np.concatenate(obs), np.concatenate(act).astype(np.float64)


def bc_pretrain(policy, obs, actions, config):
    """MSE regression of the mean net onto demo actions; value net and log_std untouched."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[0] == 0:
        raise DataError("empty demonstration")
    opt = dn.adam(config.lr, policy.mean_params.size)
    rng = np.random.default_rng(config.seed)
    mp = policy.mean_params
    for _ in range(config.steps):
        idx = rng.choice(obs.shape[0], size=min(config.batch, obs.shape[0]), replace=False)
        _, g = dn.loss_and_grad(policy.mean_spec, mp, dn.Batch(obs[idx], actions[idx], "mse"))
        mp, opt = dn.optimizer_step(opt, mp, g)
    return replace(policy, mean_params=mp)


def bc_mse(policy, obs, actions):
    return float(np.mean(np.sum((policy.mean(obs) - actions) ** 2, axis=1)))


# -- environments ------------------------------------------------------------

def target_slot(task, subtask_index):
    return task.scene_colors.index(task.target_colors[subtask_index])


def initial_states(config, task, subtask_index, n, seed, other_start=0.0):
    """Seeded scenes.  A fraction ``other_start`` begins at rest on another target."""
    rng = np.random.default_rng(seed)
    slot = target_slot(task, subtask_index)
    angles, positions = np.empty((n, 2)), np.empty((n, len(task.scene_colors), 2))
    for i in range(n):
        s = rc.new_scene(config, task, rng)
        positions[i] = s.target_positions
        angles[i] = s.joint_angles
        if rng.random() < other_start:
            others = [k for k in range(len(task.target_colors)) if k != subtask_index]
            if others:
                k = target_slot(task, others[rng.integers(len(others))])
                angles[i] = rc.ik(config, s.target_positions[k])
    return angles, np.zeros((n, 2)), positions, slot


def _backgrounds(config, task, positions):
    return [rc.render_background(config, task.scene_colors, p) for p in positions]


@dataclass
class Trajectories:
    obs: np.ndarray        # (B, T, W)
    actions: np.ndarray    # (B, T, 2), raw policy samples
    log_probs: np.ndarray  # (B, T)
    values: np.ndarray     # (B, T + 1)
    rewards: np.ndarray    # (B, T)
    angles: np.ndarray     # (B, T + 1, 2)
    ee: np.ndarray         # (B, T + 1, 2)
    positions: np.ndarray  # (B, N, 2)
    slot: int
    done: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.done is None:
            self.done = np.zeros(self.rewards.shape, bool)
            self.done[:, -1] = True


def rollout(policy, config, start, steps, rng=None):
    """Run a batch of scenes for ``steps`` steps; stochastic iff ``rng`` is given."""
    angles, vel, positions, slot = start
    b = angles.shape[0]
    W = obs_width(positions.shape[1])
    obs = np.empty((b, steps, W))
    acts = np.empty((b, steps, 2))
    all_angles = np.empty((b, steps + 1, 2))
    all_angles[:, 0] = angles
    for t in range(steps):
        o = observe(angles, vel, positions)
        obs[:, t] = o
        u = policy.act(o, rng)
        acts[:, t] = u
        angles, vel = rc.step_batch(config, angles, vel, config.torque_limit * u)
        all_angles[:, t + 1] = angles
    last = observe(angles, vel, positions)
    return obs, acts, all_angles, last


def ground_truth_reward(config, ee, positions, slot, actions):
    dist = np.linalg.norm(ee[:, 1:] - positions[:, None, slot], axis=2)
    u = np.clip(actions, -1.0, 1.0)
    return -dist - 0.01 * np.sum(u * u, axis=2)


def inferred_reward(model, config, task, positions, angles, scale):
    """Anchored step reward on rendered frames; anchor is the first frame of the segment."""
    out = np.empty((angles.shape[0], angles.shape[1] - 1))
    for i, bg in enumerate(_backgrounds(config, task, positions)):
        frames = rc.render_arm_batch(config, bg, angles[i])
        out[i] = scale * np.diff(anchored_scores(model, frames[0], frames))
    return out


def collect(policy, config, task, subtask_index, source, n, seed, rng, scale=10.0, other_start=0.5):
    start = initial_states(config, task, subtask_index, n, seed, other_start)
    positions, slot = start[2], start[3]
    obs, acts, angles, last = rollout(policy, config, start, T_SUB, rng)
    ee = rc.fk(config, angles)
    if source == "ground_truth_dense":
        rewards = ground_truth_reward(config, ee, positions, slot, acts)
    else:
        rewards = inferred_reward(source, config, task, positions, angles, scale)
    if not np.all(np.isfinite(rewards)):
        raise NumericError("non-finite reward", index=int(np.flatnonzero(~np.isfinite(rewards.ravel()))[0]))
    flat = obs.reshape(-1, obs.shape[-1])
    values = np.zeros((n, T_SUB + 1))
    values[:, :-1] = policy.value(flat).reshape(n, T_SUB)  # episode ends at T_SUB: bootstrap 0
    mu = policy.mean(flat)
    lp = log_prob(mu, policy.log_std, acts.reshape(-1, 2)).reshape(n, T_SUB)
    return Trajectories(obs, acts, lp, values, rewards, angles, ee, positions, slot)


# -- training and evaluation -------------------------------------------------

@dataclass
class RLConfig:
    iterations: int = 300
    rollouts: int = 16
    gamma: float = 0.99
    lam: float = 0.95
    reward_scale: float = 10.0
    other_start: float = 0.5
    probe_episodes: int = 20
    bc: bool = False
    seed: int = 0
    ppo: PPOConfig = field(default_factory=PPOConfig)
    bc_config: BCConfig = field(default_factory=BCConfig)


def train_policy(config, task, subtask_index, source, rl, demos=None, progress=None):
    """PPO on one subtask.  ``source`` is ``"ground_truth_dense"`` or a RewardModel.

    Returns ``(policy, curve)`` where ``curve[i]`` is the probe success rate
    after ``i`` updates (``curve[0]`` is the initial policy).
    """
    slot = target_slot(task, subtask_index)
    policy = new_policy(len(task.scene_colors), rl.seed, slot)
    if rl.bc:
        obs, act = demo_pairs(demos or [], config, subtask_index)
        policy = bc_pretrain(policy, obs, act, rl.bc_config)
    rng = np.random.default_rng(rl.seed)
    ss = np.random.SeedSequence(rl.seed)
    probe_seed = rl.seed + 7919
    curve = [evaluate_policy(policy, config, task, subtask_index, rl.probe_episodes, probe_seed)]
    opt = None
    for it, child in enumerate(ss.spawn(rl.iterations)):
        scene_seed = int(child.generate_state(1)[0])
        tr = collect(policy, config, task, subtask_index, source, rl.rollouts, scene_seed, rng,
                     rl.reward_scale, rl.other_start)
        adv = gae(tr.rewards, tr.values, rl.gamma, rl.lam)
        ret = adv + tr.values[:, :-1]
        batch = RolloutBatch(tr.obs.reshape(-1, tr.obs.shape[-1]), tr.actions.reshape(-1, 2),
                             tr.log_probs.ravel(), normalize_advantages(adv.ravel()), ret.ravel())
        policy, opt = ppo_update(policy, batch, replace(rl.ppo, seed=rl.ppo.seed + it), opt)
        curve.append(evaluate_policy(policy, config, task, subtask_index, rl.probe_episodes, probe_seed))
        if progress:
            progress(it, curve[-1])
    return policy, curve


def evaluate_policy(policy, config, task, subtask_index, n_trials, seed):
    """Success rate of the deterministic policy from folded starts."""
    start = initial_states(config, task, subtask_index, n_trials, seed)
    _, _, angles, _ = rollout(policy, config, start, T_SUB)
    ee = rc.fk(config, angles[:, 1:])
    target = start[2][:, start[3]]
    return sum(rc.success_check(config, ee[i], target[i]) for i in range(n_trials)) / n_trials


def execute_sequence(policies, config, task, order, n_trials, seed, budget=T_SUB):
    """Run policies one after another in demo ``order`` (colors).

    Each stage runs until its target is held for ``hold_frames`` or ``budget``
    steps pass.  Returns ``(per_stage_rates, overall_rate)``.
    """
    order = tuple(order)
    if len(policies) != len(order):
        raise ShapeError("one policy per subtask")
    first = task.target_colors.index(order[0])
    angles, vel, positions, _ = initial_states(config, task, first, n_trials, seed)
    slots = [task.scene_colors.index(c) for c in order]
    ok = np.zeros((n_trials, len(order)), bool)
    for k, (pol, slot) in enumerate(zip(policies, slots)):
        run = np.zeros(n_trials, int)
        target = positions[:, slot]
        for _ in range(budget):
            live = ~ok[:, k]
            if not live.any():
                break
            u = pol.act(observe(angles[live], vel[live], positions[live]))
            a, v = rc.step_batch(config, angles[live], vel[live], config.torque_limit * u)
            angles[live], vel[live] = a, v
            inside = np.linalg.norm(rc.fk(config, a) - target[live], axis=1) <= config.target_radius
            r = np.where(inside, run[live] + 1, 0)
            run[live] = r
            ok[live, k] = r >= config.hold_frames
    per = ok.mean(axis=0)
    overall = float(np.all(ok, axis=1).mean())
    return [float(x) for x in per], overall
