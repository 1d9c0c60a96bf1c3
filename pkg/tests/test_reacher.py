import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfo import reacher as rc
from lfo.data import TaskSpec
from lfo.errors import ConfigError, GenerationError

CFG = rc.EnvConfig()
TASK = TaskSpec((0, 1), (2, 3))


def state(angles=(0.0, 0.0), vel=(0.0, 0.0), colors=(), positions=None):
    pos = np.zeros((len(colors), 2)) if positions is None else np.asarray(positions, float)
    return rc.ArmState(np.array(angles, float), np.array(vel, float), tuple(colors), pos)


@pytest.mark.parametrize("angles,expected", [
    ((0, 0), (1.0, 0.0)),
    ((np.pi / 2, 0), (0.0, 1.0)),
    ((np.pi / 2, -np.pi / 2), (0.5, 0.5)),
])
def test_fk_examples(angles, expected):
    assert np.allclose(rc.fk(CFG, angles), expected, atol=1e-12)


def test_fk_norm_bounded_on_grid():
    g = np.linspace(-np.pi, np.pi, 100)
    a = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    assert np.all(np.linalg.norm(rc.fk(CFG, a), axis=1) <= sum(CFG.link_lengths) + 1e-12)


def test_wrap_range():
    a = rc.wrap(np.array([np.pi, -np.pi, 3 * np.pi, 0.0, -0.5]))
    assert np.all(a > -np.pi) and np.all(a <= np.pi)
    assert a[1] == np.pi


def test_step_zero_action():
    s = state((0.3, -0.2))
    s2 = rc.step_dynamics(CFG, s, np.zeros(2))
    assert np.array_equal(s2.joint_angles, s.joint_angles)
    assert s2.time_step == 1


def test_step_clamps_action():
    s = state((0.3, -0.2), (0.01, 0.02))
    a = rc.step_dynamics(CFG, s, np.array([5.0, -5.0]))
    b = rc.step_dynamics(CFG, s, np.array([CFG.torque_limit, -CFG.torque_limit]))
    assert np.array_equal(a.joint_angles, b.joint_angles)
    assert np.array_equal(a.joint_velocities, b.joint_velocities)


def test_step_undamped_velocity():
    cfg = rc.EnvConfig(damping=1.0)
    s2 = rc.step_dynamics(cfg, state((0.2, 0.0), (0.1, 0.0)), np.zeros(2))
    assert s2.joint_angles[0] == pytest.approx(0.3, abs=1e-15)


def test_step_keeps_targets():
    s = state(colors=(1, 2), positions=[[0.5, 0.1], [-0.2, 0.6]])
    s2 = rc.step_dynamics(CFG, s, np.array([0.01, 0.0]))
    assert s2.target_colors == s.target_colors
    assert s2.target_positions is s.target_positions


def test_render_empty_offscreen_is_black():
    cfg = rc.EnvConfig(base=(5.0, 5.0))
    frame = rc.render(cfg, state())
    assert frame.shape == (24, 24, 3)
    assert not frame.any()


def test_render_deterministic():
    s = state((0.7, -1.1), colors=(0, 3), positions=[[0.5, 0.2], [-0.4, -0.4]])
    assert np.array_equal(rc.render(CFG, s), rc.render(CFG, s))


def test_render_center_target_matches_scan_oracle():
    cfg = rc.EnvConfig(base=(5.0, 5.0))  # keep the arm out of the picture
    frame = rc.render(cfg, state(colors=(2,), positions=[[0.0, 0.0]]))
    n = cfg.image_size
    colored = []
    for r in range(n):
        for c in range(n):
            x = -1 + (c + 0.5) * 2 / n
            y = 1 - (r + 0.5) * 2 / n
            if x * x + y * y <= cfg.target_radius ** 2:
                colored.append((r, c))
    found = [tuple(p) for p in np.argwhere(frame.any(axis=2))]
    assert sorted(found) == sorted(colored)
    assert np.allclose(frame[n // 2, n // 2], cfg.palette[2])


@settings(max_examples=40, deadline=None)
@given(st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi),
       st.sampled_from([{}, {"tip_radius": 0.12, "link_intensity": 0.5}, {"arm_width": 0.1}]))
def test_render_values_in_unit_interval(t1, t2, extra):
    cfg = rc.EnvConfig(**extra)
    s = state((t1, t2), colors=(0, 1, 2, 3), positions=[[0.6, 0], [0, 0.6], [-0.6, 0], [0, -0.6]])
    f = rc.render(cfg, s)
    assert f.shape == (cfg.image_size, cfg.image_size, 3)
    assert f.min() >= 0.0 and f.max() <= 1.0


def test_thin_arm_pixels_are_connected():
    s = state((0.4, 0.9))
    f = rc.render(rc.EnvConfig(), s)
    lit = {tuple(p) for p in np.argwhere(f.any(axis=2))}
    seen, todo = set(), [next(iter(lit))]
    while todo:
        r, c = todo.pop()
        if (r, c) in seen:
            continue
        seen.add((r, c))
        todo += [(r + i, c + j) for i in (-1, 0, 1) for j in (-1, 0, 1) if (r + i, c + j) in lit]
    assert seen == lit


def test_render_batch_matches_single():
    s = state((0.4, 0.9), colors=(0, 1), positions=[[0.6, 0], [0, 0.6]])
    bg = rc.render_background(CFG, s.target_colors, s.target_positions)
    angles = np.array([[0.4, 0.9], [-2.0, 1.0]])
    batch = rc.render_arm_batch(CFG, bg, angles)
    assert np.array_equal(batch[0], rc.render(CFG, s))


def test_expert_at_goal_is_zero():
    pos = np.array([[0.4, 0.5]])
    goal = rc.ik(CFG, pos[0])
    s = state(goal, colors=(3,), positions=pos)
    assert np.allclose(rc.expert_action(CFG, s, 3), 0.0, atol=1e-12)


def test_expert_wraps_short_way():
    goal = np.array([-np.pi + 0.1, 0.0])
    a = rc.expert_torque(CFG, np.array([np.pi - 0.1, 0.0]), np.zeros(2), goal)
    assert a[0] > 0


def test_expert_missing_color():
    with pytest.raises(LookupError):
        rc.expert_action(CFG, state(colors=(0,), positions=[[0.5, 0.5]]), 5)


def test_ik_roundtrip_and_batch():
    rng = np.random.default_rng(0)
    r = rng.uniform(0.1, 0.95, 200)
    a = rng.uniform(-np.pi, np.pi, 200)
    pts = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    batch = rc.ik_batch(CFG, pts)
    for p, b in zip(pts, batch):
        assert np.array_equal(rc.ik(CFG, p), b)
    assert np.allclose(rc.fk(CFG, batch), pts, atol=1e-9)
    assert np.all(batch[:, 1] <= 0)  # elbow-up branch


def test_ik_clamps_unreachable():
    q = rc.ik(CFG, np.array([3.0, 0.0]))
    assert np.allclose(rc.fk(CFG, q), [1.0, 0.0], atol=1e-6)


def test_expert_reaches_from_random_starts():
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(50):
        s = rc.new_scene(CFG, TASK, rng)
        trace = []
        for _ in range(CFG.episode_length):
            s = rc.step_dynamics(CFG, s, rc.expert_action(CFG, s, 0))
            trace.append(rc.fk(CFG, s.joint_angles))
        hits += np.linalg.norm(trace[-1] - s.target_of(0)) <= CFG.target_radius
    assert hits / 50 >= 0.95


def test_success_check_examples():
    H = CFG.hold_frames
    t = np.zeros(2)
    assert rc.success_check(CFG, np.zeros((H, 2)), t)
    pattern = np.array([[0, 0]] * (H - 1) + [[1, 1]])
    assert not rc.success_check(CFG, np.tile(pattern, (3, 1)), t)
    assert not rc.success_check(CFG, np.zeros((0, 2)), t)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), max_size=60))
def test_success_check_matches_run_oracle(flags):
    trace = np.array([[0.0, 0.0] if f else [1.0, 0.0] for f in flags]).reshape(-1, 2)
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    assert rc.success_check(CFG, trace, np.zeros(2)) == (best >= CFG.hold_frames)


@pytest.mark.parametrize("order", [(0, 1), (1, 0)])
def test_rollout_expert_label_blocks(order):
    v = rc.rollout_expert(CFG, TASK, order, seed=4)
    labels = v.frame_labels
    phases = [labels[0]] + [b for a, b in zip(labels[:-1], labels[1:]) if a != b]
    assert phases == [TASK.target_colors.index(c) for c in order]
    assert np.all((labels >= 0) & (labels < TASK.K))
    assert len(v.frames) == len(labels) == len(v.states) == len(v.actions)


def test_rollout_expert_deterministic():
    a = rc.rollout_expert(CFG, TASK, (1, 0), seed=9)
    b = rc.rollout_expert(CFG, TASK, (1, 0), seed=9)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.actions, b.actions)


def test_rollout_expert_budget_error():
    with pytest.raises(GenerationError):
        rc.rollout_expert(rc.EnvConfig(episode_length=20), TASK, (0, 1), seed=1)


def test_rollout_expert_bad_order():
    with pytest.raises(ValueError):
        rc.rollout_expert(CFG, TASK, (0, 2), seed=1)


@pytest.mark.parametrize("kw", [{"link_lengths": (0.5, 0.0)}, {"hold_frames": 200},
                                {"image_size": 1}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        rc.EnvConfig(**kw)


def test_config_dict_roundtrip():
    cfg = rc.EnvConfig(tip_radius=0.1, start_fold=(-1.0, 1.0))
    assert rc.EnvConfig.from_dict(cfg.to_dict()) == cfg
