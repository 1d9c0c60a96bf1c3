"""Two-joint planar reacher: kinematics, damped joint dynamics, rendering and a scripted expert.

Dynamics are a damped double integrator in joint space, ``v' = damping*v + a``
and ``theta' = wrap(theta + v')``, with the torque ``a`` clipped to the limit.
Each color has a home position on the reachable annulus; a scene jitters the
homes of its colors so that target placement is random but color-consistent.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledVideo, TaskSpec
from .errors import ConfigError, GenerationError

NOISE_CORR = 0.9
NOISE_FADE = 0.3  # perturbations fade out over this distance outside the target disk

# train colors 0-3, meta-test colors 4-7
DEFAULT_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.3, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.6, 0.2, 1.0),
)


@dataclass(frozen=True)
class EnvConfig:
    link_lengths: tuple = (0.5, 0.5)
    torque_limit: float = 0.05
    damping: float = 0.9
    target_radius: float = 0.15
    hold_frames: int = 16
    episode_length: int = 120
    image_size: int = 24
    palette: tuple = DEFAULT_PALETTE
    n_targets: int = 4
    kp: float = 0.02
    kd: float = 0.1
    home_radius: tuple = (0.55, 0.85)
    home_jitter: float = 0.2
    start_fold: tuple = (-3.1, 3.1)
    start_heading: tuple = (-np.pi, np.pi)
    home_layout: str = "interleaved"
    base: tuple = (0.0, 0.0)  # where the arm is drawn; the camera always shows [-1, 1]^2
    expert_noise: float = 0.0
    arm_width: float = 0.0
    tip_radius: float = 0.12
    link_intensity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "link_lengths", tuple(float(v) for v in self.link_lengths))
        object.__setattr__(self, "palette", tuple(tuple(float(x) for x in c) for c in self.palette))
        object.__setattr__(self, "home_radius", tuple(float(v) for v in self.home_radius))
        object.__setattr__(self, "base", tuple(float(v) for v in self.base))
        object.__setattr__(self, "start_fold", tuple(float(v) for v in self.start_fold))
        object.__setattr__(self, "start_heading", tuple(float(v) for v in self.start_heading))
        if min(self.link_lengths) <= 0:
            raise ConfigError("link lengths must be positive")
        if self.hold_frames >= self.episode_length:
            raise ConfigError("hold_frames must be shorter than the episode")
        if self.image_size < 2:
            raise ConfigError("image_size too small")

    @property
    def reach(self):
        return sum(self.link_lengths)

    def home(self, color):
        """Nominal position of a color: train colors on the axes, meta colors on the diagonals."""
        n = len(self.palette)
        half = n // 2
        if self.home_layout == "shared":
            angle = 2 * np.pi * (color % half) / half
        else:
            slot = 2 * color if color < half else 2 * (color - half) + 1
            angle = 2 * np.pi * slot / (2 * half)
        r = 0.5 * (self.home_radius[0] + self.home_radius[1])
        return np.array([r * np.cos(angle), r * np.sin(angle)])

    def to_dict(self):
        return {k: (list(map(list, v)) if k == "palette" else (list(v) if isinstance(v, tuple) else v))
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "palette" in d:
            d["palette"] = tuple(tuple(c) for c in d["palette"])
        for key in ("link_lengths", "home_radius", "start_fold", "start_heading", "base"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ArmState:
    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    target_colors: tuple
    target_positions: np.ndarray = field(repr=False)
    time_step: int = 0

    def target_of(self, color):
        try:
            return self.target_positions[self.target_colors.index(color)]
        except ValueError:
            raise LookupError(f"color {color} is not in this scene") from None


def wrap(angle):
    """Map to (-pi, pi]."""
    x = np.asarray(angle, dtype=np.float64)
    a = np.mod(x + np.pi, 2 * np.pi) - np.pi
    a = np.where(a <= -np.pi, np.pi, a)
    return np.where((x > -np.pi) & (x <= np.pi), x, a)  # in-range values pass through exactly


def fk(config, angles):
    angles = np.asarray(angles, dtype=np.float64)
    l1, l2 = config.link_lengths
    t1, t12 = angles[..., 0], angles[..., 0] + angles[..., 1]
    return np.stack([l1 * np.cos(t1) + l2 * np.cos(t12), l1 * np.sin(t1) + l2 * np.sin(t12)], axis=-1)


def elbow(config, angles):
    angles = np.asarray(angles, dtype=np.float64)
    l1 = config.link_lengths[0]
    return np.stack([l1 * np.cos(angles[..., 0]), l1 * np.sin(angles[..., 0])], axis=-1)


def ik(config, point):
    """Elbow-up inverse kinematics; unreachable distances are clamped onto the annulus."""
    l1, l2 = config.link_lengths
    x, y = float(point[0]), float(point[1])
    d = np.hypot(x, y)
    lo, hi = abs(l1 - l2) + 1e-9, l1 + l2 - 1e-9
    d_c = min(max(d, lo), hi)
    if d > 0:
        x, y = x * d_c / d, y * d_c / d
    else:
        x, y = d_c, 0.0
    c2 = np.clip((d_c ** 2 - l1 ** 2 - l2 ** 2) / (2 * l1 * l2), -1.0, 1.0)
    t2 = -np.arccos(c2)
    t1 = np.arctan2(y, x) - np.arctan2(l2 * np.sin(t2), l1 + l2 * np.cos(t2))
    return wrap(np.array([t1, t2]))


def ik_batch(config, points):
    """``ik`` over a ``(..., 2)`` array of points."""
    l1, l2 = config.link_lengths
    p = np.asarray(points, dtype=np.float64)
    d = np.hypot(p[..., 0], p[..., 1])
    d_c = np.clip(d, abs(l1 - l2) + 1e-9, l1 + l2 - 1e-9)
    safe = np.where(d > 0, d, 1.0)
    x = np.where(d > 0, p[..., 0] * d_c / safe, d_c)
    y = np.where(d > 0, p[..., 1] * d_c / safe, 0.0)
    c2 = np.clip((d_c ** 2 - l1 ** 2 - l2 ** 2) / (2 * l1 * l2), -1.0, 1.0)
    t2 = -np.arccos(c2)
    t1 = np.arctan2(y, x) - np.arctan2(l2 * np.sin(t2), l1 + l2 * np.cos(t2))
    return wrap(np.stack([t1, t2], axis=-1))


def clip_action(config, action):
    return np.clip(np.asarray(action, dtype=np.float64), -config.torque_limit, config.torque_limit)


def step_dynamics(config, state, action):
    a = clip_action(config, action)
    v = config.damping * np.asarray(state.joint_velocities, dtype=np.float64) + a
    theta = wrap(np.asarray(state.joint_angles, dtype=np.float64) + v)
    return replace(state, joint_angles=theta, joint_velocities=v, time_step=state.time_step + 1)


def step_batch(config, angles, velocities, actions):
    """Vectorised ``step_dynamics`` over leading batch dimensions."""
    v = config.damping * velocities + clip_action(config, actions)
    return wrap(angles + v), v


def expert_torque(config, angles, velocities, goal_angles):
    a = config.kp * wrap(goal_angles - angles) - config.kd * velocities
    return clip_action(config, a)


def expert_action(config, state, target_color):
    goal = ik(config, state.target_of(target_color))
    return expert_torque(config, state.joint_angles, state.joint_velocities, goal)


# -- rendering ---------------------------------------------------------------

def _to_pixel(config, xy):
    """World -> integer (col, row); row 0 is the top of the image."""
    n = config.image_size
    xy = np.asarray(xy, dtype=np.float64)
    col = np.floor((xy[..., 0] + 1.0) * 0.5 * n).astype(np.int64)
    row = np.floor((1.0 - xy[..., 1]) * 0.5 * n).astype(np.int64)
    return col, row


def _pixel_centers(config):
    n = config.image_size
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    xs = c[None, :]
    ys = -c[:, None]
    return xs, ys


def render_background(config, target_colors, target_positions):
    n = config.image_size
    img = np.zeros((n, n, 3), dtype=np.float32)
    xs, ys = _pixel_centers(config)
    for color, pos in zip(target_colors, target_positions):
        inside = (xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 <= config.target_radius ** 2
        img[inside] = config.palette[color]
    return img


def _segment_pixels(c0, r0, c1, r1):
    """Integer midpoint rasterisation; returns (k, cols, rows) over the batch."""
    dc, dr = c1 - c0, r1 - r0
    steps = np.maximum(np.abs(dc), np.abs(dr))
    m = int(steps.max(initial=0)) + 1
    k = np.arange(m)[None, :]
    s = np.maximum(steps, 1)[:, None]
    # round(c0 + k*dc/s) with ties away from the start, all in integers
    cols = c0[:, None] + np.sign(dc)[:, None] * ((2 * k * np.abs(dc)[:, None] + s) // (2 * s))
    rows = r0[:, None] + np.sign(dr)[:, None] * ((2 * k * np.abs(dr)[:, None] + s) // (2 * s))
    valid = k <= steps[:, None]
    return valid, cols, rows


def _thick_arm_mask(config, joints):
    """Pixels whose centers lie within ``arm_width / 2`` of either link: ``(B, n, n)``."""
    xs, ys = np.broadcast_arrays(*_pixel_centers(config))
    px = np.stack([xs.ravel(), ys.ravel()], axis=1)  # (P, 2)
    half = 0.5 * config.arm_width
    mask = np.zeros((joints[0].shape[0], px.shape[0]), bool)
    for p, q in zip(joints[:-1], joints[1:]):
        d = q - p
        den = np.maximum(np.sum(d * d, axis=1), 1e-12)[:, None]
        rel = px[None, :, :] - p[:, None, :]
        u = np.clip(np.einsum("bpk,bk->bp", rel, d) / den, 0.0, 1.0)
        near = rel - u[..., None] * d[:, None, :]
        mask |= np.einsum("bpk,bpk->bp", near, near) <= half * half
    n = config.image_size
    return mask.reshape(-1, n, n)


def render_arm_batch(config, background, angles):
    """Frames for a batch of joint angles over a shared background: ``(B, n, n, 3)``."""
    angles = np.atleast_2d(angles)
    b = angles.shape[0]
    n = config.image_size
    frames = np.repeat(background[None], b, axis=0)
    base = np.broadcast_to(np.asarray(config.base), (b, 2))
    joints = [base, elbow(config, angles) + base, fk(config, angles) + base]
    if config.link_intensity > 0 and config.arm_width > 0:
        frames[_thick_arm_mask(config, joints)] = config.link_intensity
    elif config.link_intensity > 0:
        _draw_thin_links(config, frames, joints)
    if config.tip_radius > 0:
        xs, ys = _pixel_centers(config)
        tip = joints[-1]
        inside = (xs[None] - tip[:, 0, None, None]) ** 2 + (ys[None] - tip[:, 1, None, None]) ** 2
        frames[inside <= config.tip_radius ** 2] = 1.0
    return frames


def _draw_thin_links(config, frames, joints):
    n = config.image_size
    idx = np.arange(frames.shape[0])
    for p, q in zip(joints[:-1], joints[1:]):
        c0, r0 = _to_pixel(config, p)
        c1, r1 = _to_pixel(config, q)
        valid, cols, rows = _segment_pixels(c0, r0, c1, r1)
        valid &= (cols >= 0) & (cols < n) & (rows >= 0) & (rows < n)
        bi = np.broadcast_to(idx[:, None], valid.shape)
        frames[bi[valid], rows[valid], cols[valid]] = config.link_intensity


def render(config, state):
    bg = render_background(config, state.target_colors, state.target_positions)
    return render_arm_batch(config, bg, np.asarray(state.joint_angles)[None])[0]


# -- scenes and rollouts -----------------------------------------------------

def place_targets(config, colors, rng):
    """Jittered home positions, rows in the order of ``colors``."""
    out = []
    for c in colors:
        home = config.home(c)
        angle = np.arctan2(home[1], home[0]) + rng.uniform(-config.home_jitter, config.home_jitter)
        r = rng.uniform(*config.home_radius)
        out.append([r * np.cos(angle), r * np.sin(angle)])
    return np.array(out)


def start_angles(config, rng):
    """Folded arm (end effector near the base) at a random heading."""
    return wrap(np.array([rng.uniform(*config.start_heading), rng.uniform(*config.start_fold)]))


def new_scene(config, task, rng):
    colors = task.scene_colors
    if len(colors) > len(config.palette):
        raise ConfigError("palette smaller than the number of colors in use")
    positions = place_targets(config, colors, rng)
    angles = start_angles(config, rng)
    return ArmState(angles, np.zeros(2), colors, positions, 0)


def success_check(config, ee_trace, target):
    """True iff at least ``hold_frames`` consecutive trace points are within the target radius."""
    trace = np.asarray(ee_trace, dtype=np.float64).reshape(-1, 2)
    if trace.shape[0] == 0:
        return False
    inside = np.linalg.norm(trace - np.asarray(target), axis=1) <= config.target_radius
    run = 0
    for flag in inside:
        run = run + 1 if flag else 0
        if run >= config.hold_frames:
            return True
    return False


def rollout_expert(config, task, order, seed):
    """Scripted demonstration of ``task`` visiting targets in ``order``.

    Every frame is labeled with the index (into ``task.target_colors``) of the
    subtask active when it was rendered. A subtask ends once the end effector
    has stayed within the target radius for ``hold_frames`` frames.
    """
    order = tuple(int(c) for c in order)
    if sorted(order) != sorted(task.target_colors):
        raise ValueError(f"order {order} is not a permutation of {task.target_colors}")
    rng = np.random.default_rng(seed)
    state = new_scene(config, task, rng)
    background = render_background(config, state.target_colors, state.target_positions)
    angles, labels, states, actions = [], [], [], []
    noise = np.zeros(2)
    for color in order:
        goal = ik(config, state.target_of(color))
        target = state.target_of(color)
        run = 0
        while run < config.hold_frames:
            if len(labels) >= config.episode_length:
                raise GenerationError(
                    f"expert did not finish {order} within {config.episode_length} frames (seed {seed})"
                )
            a = expert_torque(config, state.joint_angles, state.joint_velocities, goal)
            if config.expert_noise > 0:
                # temporally correlated torque perturbation, in torque-limit units
                noise = NOISE_CORR * noise + np.sqrt(1 - NOISE_CORR ** 2) * rng.standard_normal(2)
                gap = np.linalg.norm(fk(config, state.joint_angles) - target) - config.target_radius
                fade = min(1.0, max(0.0, gap / NOISE_FADE))
                a = clip_action(config, a + fade * config.expert_noise * config.torque_limit * noise)
            angles.append(state.joint_angles)
            labels.append(task.target_colors.index(color))
            states.append(np.concatenate([state.joint_angles, state.joint_velocities]))
            actions.append(a)
            inside = np.linalg.norm(fk(config, state.joint_angles) - target) <= config.target_radius
            run = run + 1 if inside else 0
            state = step_dynamics(config, state, a)
    frames = render_arm_batch(config, background, np.array(angles))
    return LabeledVideo(
        frames=frames,
        frame_labels=np.array(labels, dtype=np.int64),
        states=np.array(states, dtype=np.float32),
        actions=np.array(actions, dtype=np.float32),
        task=task,
        order=order,
        target_positions=state.target_positions.astype(np.float32),
        seed=seed,
    )
