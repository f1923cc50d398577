"""Procedural 2-D tabletop lift task.

World coordinates live in ``[0, 1]^2`` with ``y`` pointing up; image row 0 is
the top of the workspace. The gripper must reach a disc-shaped object, close
on it, and carry it above the lift line. Appearance (table, object and
distractor colors, pixel noise) never feeds back into the dynamics.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from taskobs.errors import InvalidValueError, TaskObsError
from taskobs.obs_core import TaskSpec, Variant, build_observation, mask_iou
from taskobs.providers import MaskDegradation, PerceptionResult, degrade_masks
from taskobs.seeding import derive_seed, rng_for

RESOLUTION = 64
MAX_STEP = 0.05
GRASP_RADIUS = 0.04
CLOSE_RADIUS = 0.03
LIFT_LINE = 0.8
OBJECT_RADIUS = 0.06
# start-state sampling box, (lo, hi) per axis
GRIPPER_START = ((0.1, 0.9), (0.45, 0.75))
OBJECT_START = ((0.3, 0.7), (0.2, 0.3))
EXPERT_STEP_LIMIT = 200

GRIPPER_COLOR = (40, 40, 40)
FINGER_WIDTH = 0.03
FINGER_GAP_OPEN = 0.08  # inner half-gap
FINGER_GAP_CLOSED = 0.055
FINGER_BOTTOM = -0.03
FINGER_TOP = 0.05
BAR_TOP = 0.08
STEM_HALF_WIDTH = 0.02
STEM_TOP = 0.16

TABLE_DEPTH = 1.0
GRIPPER_DEPTH = 0.75
OBJECT_DOME = 0.1

THEME_VERSION = 1


@dataclass(frozen=True)
class AppearanceTheme:
    name: str
    table_color: tuple
    object_color: tuple
    distractor_palette: tuple = ()
    noise_amplitude: int = 0

    def with_noise(self, amplitude: int) -> "AppearanceTheme":
        return dataclasses.replace(self, noise_amplitude=int(amplitude))


_DISTRACTORS = ((40, 160, 200), (210, 130, 40), (150, 60, 170), (120, 200, 120), (230, 90, 160))

TRAIN_THEME = AppearanceTheme("train", (150, 140, 120), (210, 50, 50), _DISTRACTORS, 4)

# held-out appearances; geometry is sampled identically for every condition
THEMES = {
    "ID": TRAIN_THEME,
    "OOD_OBJ_1": dataclasses.replace(TRAIN_THEME, name="ood_obj_1", object_color=(50, 170, 60)),
    "OOD_OBJ_2": dataclasses.replace(TRAIN_THEME, name="ood_obj_2", object_color=(60, 90, 220)),
    "OOD_OBJ_3": dataclasses.replace(TRAIN_THEME, name="ood_obj_3", object_color=(225, 205, 60)),
    "OOD_BG_1": dataclasses.replace(TRAIN_THEME, name="ood_bg_1", table_color=(70, 120, 70)),
    "OOD_BG_2": dataclasses.replace(TRAIN_THEME, name="ood_bg_2", table_color=(70, 90, 170)),
    "OOD_BG_3": dataclasses.replace(TRAIN_THEME, name="ood_bg_3", table_color=(235, 235, 235)),
}
CONDITIONS = tuple(THEMES)
OOD_CONDITIONS = tuple(c for c in CONDITIONS if c != "ID")


def distractor_count(condition: str) -> int:
    if condition.startswith("OOD_BG_"):
        return int(condition.rsplit("_", 1)[1]) + 1
    return 0


@dataclass(frozen=True)
class Distractor:
    pos: tuple
    radius: float
    color: tuple


@dataclass(frozen=True)
class SceneState:
    gripper_pos: tuple
    object_pos: tuple
    appearance: AppearanceTheme = TRAIN_THEME
    gripper_closed: bool = False
    object_attached: bool = False
    object_lifted: bool = False
    distractors: tuple = ()
    object_radius: float = OBJECT_RADIUS

    def __post_init__(self):
        for name in ("gripper_pos", "object_pos"):
            p = tuple(float(v) for v in getattr(self, name))
            if len(p) != 2 or not all(0.0 <= v <= 1.0 for v in p):
                raise InvalidValueError(f"{name} must lie in [0, 1]^2, got {p}")
            object.__setattr__(self, name, p)

    def geometry_key(self) -> bytes:
        """Bytes describing everything but appearance."""
        return repr((self.gripper_pos, self.object_pos, self.gripper_closed, self.object_attached,
                     self.object_lifted, self.object_radius,
                     tuple((d.pos, d.radius) for d in self.distractors))).encode()


@dataclass(frozen=True)
class Action:
    delta: tuple = (0.0, 0.0)
    grip: float = -1.0

    def clipped(self) -> "Action":
        dx, dy = (float(np.clip(v, -MAX_STEP, MAX_STEP)) for v in self.delta)
        return Action((dx, dy), float(np.clip(self.grip, -1.0, 1.0)))

    @property
    def close(self) -> bool:
        return self.grip > 0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta[0], self.delta[1], self.grip], dtype=np.float64)


@dataclass
class Episode:
    seed: int
    condition: str
    frames: list = field(default_factory=list)
    perception: list = field(default_factory=list)
    actions: list = field(default_factory=list)  # actions actually applied; replayable
    success: bool = False
    steps: int = 0
    diagnostic: str = ""
    iou: list = field(default_factory=list)  # (robot IoU, object IoU) per step when degraded
    labels: list = field(default_factory=list)  # clean expert actions, when the policy exposes them

    def targets(self) -> list:
        """Supervision targets: expert labels when recorded, else the executed actions."""
        return self.labels or self.actions


@lru_cache(maxsize=8)
def _pixel_centers(res: int):
    c = (np.arange(res) + 0.5) / res
    xs = np.broadcast_to(c[None, :], (res, res))
    ys = np.broadcast_to(1.0 - c[:, None], (res, res))
    return xs, ys


def _disc(res, pos, radius):
    xs, ys = _pixel_centers(res)
    return (xs - pos[0]) ** 2 + (ys - pos[1]) ** 2 <= radius * radius


def _rect(res, x0, x1, y0, y1):
    xs, ys = _pixel_centers(res)
    return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)


def gripper_mask(scene: SceneState, res: int = RESOLUTION) -> np.ndarray:
    gx, gy = scene.gripper_pos
    gap = FINGER_GAP_CLOSED if scene.gripper_closed else FINGER_GAP_OPEN
    outer = gap + FINGER_WIDTH
    m = _rect(res, gx - outer, gx - gap, gy + FINGER_BOTTOM, gy + FINGER_TOP)
    m |= _rect(res, gx + gap, gx + outer, gy + FINGER_BOTTOM, gy + FINGER_TOP)
    m |= _rect(res, gx - outer, gx + outer, gy + FINGER_TOP, gy + BAR_TOP)
    m |= _rect(res, gx - STEM_HALF_WIDTH, gx + STEM_HALF_WIDTH, gy + BAR_TOP, gy + STEM_TOP)
    return m


def _layers(scene: SceneState, res: int):
    obj = _disc(res, scene.object_pos, scene.object_radius)
    rob = gripper_mask(scene, res)
    return rob, obj & ~rob


def _noise_rng(scene: SceneState):
    return np.random.default_rng(zlib.crc32(scene.geometry_key()))


def render(scene: SceneState, resolution: int = RESOLUTION) -> np.ndarray:
    theme = scene.appearance
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[...] = theme.table_color
    for d in scene.distractors:
        img[_disc(resolution, d.pos, d.radius)] = d.color
    img[_disc(resolution, scene.object_pos, scene.object_radius)] = theme.object_color
    img[gripper_mask(scene, resolution)] = GRIPPER_COLOR
    a = int(theme.noise_amplitude)
    if a > 0:
        noise = _noise_rng(scene).integers(-a, a + 1, size=img.shape)
        img = np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)
    return img


def ground_truth(scene: SceneState, resolution: int = RESOLUTION) -> PerceptionResult:
    robot, obj = _layers(scene, resolution)
    xs, ys = _pixel_centers(resolution)
    depth = np.full((resolution, resolution), TABLE_DEPTH)
    r2 = ((xs - scene.object_pos[0]) ** 2 + (ys - scene.object_pos[1]) ** 2) / scene.object_radius ** 2
    disc = r2 <= 1.0
    depth[disc] = TABLE_DEPTH - OBJECT_DOME * np.sqrt(1.0 - r2[disc])
    depth[robot] = GRIPPER_DEPTH
    return PerceptionResult(robot=robot, object=obj, depth=depth)


def step(scene: SceneState, action: Action) -> SceneState:
    a = action.clipped()
    gx = float(np.clip(scene.gripper_pos[0] + a.delta[0], 0.0, 1.0))
    gy = float(np.clip(scene.gripper_pos[1] + a.delta[1], 0.0, 1.0))
    closed = a.close
    ox, oy = scene.object_pos
    attached = scene.object_attached and closed
    if attached:
        ox = float(np.clip(ox + gx - scene.gripper_pos[0], 0.0, 1.0))
        oy = float(np.clip(oy + gy - scene.gripper_pos[1], 0.0, 1.0))
    elif closed and np.hypot(ox - gx, oy - gy) <= GRASP_RADIUS:
        attached = True
    return dataclasses.replace(
        scene,
        gripper_pos=(gx, gy),
        object_pos=(ox, oy),
        gripper_closed=closed,
        object_attached=attached,
        object_lifted=attached and gy >= LIFT_LINE,
    )


def scripted_expert(scene: SceneState) -> Action:
    if scene.object_attached:
        return Action((0.0, MAX_STEP), 1.0)
    dx = scene.object_pos[0] - scene.gripper_pos[0]
    dy = scene.object_pos[1] - scene.gripper_pos[1]
    grip = 1.0 if np.hypot(dx, dy) <= CLOSE_RADIUS else -1.0
    return Action((dx, dy), grip).clipped()


def sample_scene(condition: str, seed: int, noise: int | None = None) -> SceneState:
    if condition not in THEMES:
        raise InvalidValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    theme = THEMES[condition] if noise is None else THEMES[condition].with_noise(noise)
    geo = rng_for(seed, "geometry")
    gripper = tuple(geo.uniform(lo, hi) for lo, hi in GRIPPER_START)
    obj = tuple(geo.uniform(lo, hi) for lo, hi in OBJECT_START)

    distractors = []
    drng = rng_for(seed, "distractors")
    colors = [c for c in theme.distractor_palette if c != theme.object_color]
    while len(distractors) < distractor_count(condition):
        r = drng.uniform(0.04, 0.08)
        pos = (drng.uniform(0.05, 0.95), drng.uniform(0.05, 0.95))
        if np.hypot(pos[0] - obj[0], pos[1] - obj[1]) <= r + OBJECT_RADIUS + 0.02:
            continue
        distractors.append(Distractor(pos, r, colors[drng.integers(len(colors))]))
    return SceneState(gripper_pos=gripper, object_pos=obj, appearance=theme, distractors=tuple(distractors))


class ExpertPolicy:
    """Scripted expert exposed through the rollout policy interface.

    With ``noise > 0`` the executed action is perturbed (Gaussian jitter on
    the displacement, occasional gripper flips) while ``last_label`` keeps
    the clean expert action, so demonstrations cover recovery states.
    """

    obs_history = 1
    variant = Variant.ORG

    def __init__(self, noise: float = 0.0, flip_prob: float = 0.0):
        self.noise = noise
        self.flip_prob = flip_prob
        self.last_label = None

    def act(self, obs_stack, rng, scene):
        label = scripted_expert(scene)
        self.last_label = label
        if self.noise <= 0 and self.flip_prob <= 0:
            return label
        dx, dy = label.delta
        jitter = rng.normal(0.0, self.noise, size=2)
        grip = -label.grip if rng.random() < self.flip_prob else label.grip
        return Action((dx + jitter[0], dy + jitter[1]), grip).clipped()


def perceive(scene, resolution=RESOLUTION, degradation: MaskDegradation | None = None, key=()):
    truth = ground_truth(scene, resolution)
    if degradation is None or degradation.is_identity:
        return truth, truth
    level = dataclasses.replace(degradation, seed=derive_seed(degradation.seed, *key))
    return degrade_masks(truth, level), truth


def rollout(policy, variant, condition: str, seed: int, max_steps: int = EXPERT_STEP_LIMIT,
            spec: TaskSpec = TaskSpec(), degradation: MaskDegradation | None = None,
            resolution: int = RESOLUTION, record: bool = True) -> Episode:
    """Run one closed-loop episode and report whether the object was lifted."""
    variant = Variant.parse(variant)
    scene = sample_scene(condition, seed)
    ep = Episode(seed=seed, condition=condition)
    rng = rng_for(seed, "policy-noise")
    history = []
    n_hist = max(1, getattr(policy, "obs_history", 1))
    try:
        for t in range(max_steps + 1):
            frame = render(scene, resolution)
            perception = None
            if variant.needs_masks or record or degradation is not None:
                perception, truth = perceive(scene, resolution, degradation, (seed, t))
                if degradation is not None:
                    ep.iou.append((mask_iou(perception.robot, truth.robot),
                                   mask_iou(perception.object, truth.object)))
            if record:
                ep.frames.append(frame)
                ep.perception.append(perception)
            if scene.object_lifted:
                ep.success = True
                break
            if t == max_steps:
                break
            obs = build_observation(frame, perception and perception.robot, perception and perception.object,
                                    perception and perception.depth, spec, variant)
            history = (history + [obs])[-n_hist:]
            stack = [history[0]] * (n_hist - len(history)) + history
            action = policy.act(stack, rng, scene).clipped()
            if record:
                ep.actions.append(action)
                label = getattr(policy, "last_label", None)
                if label is not None:
                    ep.labels.append(label)
            scene = step(scene, action)
            ep.steps += 1
    except TaskObsError as exc:
        ep.success = False
        ep.diagnostic = f"{type(exc).__name__}: {exc}"
    return ep


DEMO_NOISE = 0.02
DEMO_FLIP_PROB = 0.05


def expert_episode(condition: str, seed: int, resolution: int = RESOLUTION,
                   max_steps: int = EXPERT_STEP_LIMIT, noise: float = DEMO_NOISE,
                   flip_prob: float = DEMO_FLIP_PROB) -> Episode:
    """Demonstration episode; ``actions`` are the perturbed actions executed, ``labels`` the expert's."""
    return rollout(ExpertPolicy(noise, flip_prob), Variant.ORG, condition, seed, max_steps=max_steps,
                   resolution=resolution)


def replay(condition: str, seed: int, actions, resolution: int = RESOLUTION):
    scene = sample_scene(condition, seed)
    frames = [render(scene, resolution)]
    for a in actions:
        scene = step(scene, a)
        frames.append(render(scene, resolution))
    return frames, scene
