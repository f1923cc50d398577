"""Conditional flow-matching policy in plain numpy.

The observation encoder average-pools each frame onto a fixed 8x8 grid and
feeds the flattened history through ``linear -> tanh -> linear`` to a 64-d
feature. The velocity field is an MLP on ``[feature, x, s]``. Training
regresses the constant velocity ``a - x0`` of the straight path
``x_s = (1 - s) x0 + s a`` with ``x0 ~ N(0, I)``; sampling integrates the
field with explicit Euler from ``s = 0`` to ``1``.

Actions are handled internally in normalized units (``dx, dy`` divided by
the per-step limit) so all three coordinates share the scale of ``p_0``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from taskobs import kernels
from taskobs.errors import CodecError, InvalidValueError, MissingInputError, NonFiniteError
from taskobs.obs_core import Observation, TaskSpec, Variant, build_observation
from taskobs.simworld import MAX_STEP, Action

log = logging.getLogger(__name__)

ACTION_DIM = 3
ACTION_SCALE = np.array([MAX_STEP, MAX_STEP, 1.0])
GRID = 8
FEATURE_DIM = 64
ENCODER_HIDDEN = 128
VELOCITY_HIDDEN = 128
MOMENTUM = 0.9
INPUT_STD_FLOOR = 0.05

CHECKPOINT_MAGIC = b"FMP1"
_VARIANT_TAGS = {Variant.ORG: 0, Variant.L0: 1, Variant.L1: 2, Variant.S2: 3}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    ode_steps: int = 10
    obs_history: int = 2
    adapter_1x1: tuple | None = None  # ((w00, w01, w02), (w10, w11, w12), (b0, b1, b2)); S2 only

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.ode_steps < 1 or self.obs_history < 1:
            raise InvalidValueError("steps >= 0, batch/ode_steps/obs_history >= 1 required")
        if not self.learning_rate >= 0:
            raise InvalidValueError("learning_rate must be >= 0")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("adapter_1x1") is not None:
            d["adapter_1x1"] = tuple(tuple(r) for r in d["adapter_1x1"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def _in_channels(variant: Variant) -> int:
    return 2 if variant is Variant.S2 else 3


def param_shapes(variant: Variant, obs_history: int) -> dict:
    """Parameter names and shapes in checkpoint order."""
    shapes = {}
    if variant is Variant.S2:
        shapes["adapter_w"] = (2, 3)
        shapes["adapter_b"] = (3,)
    d_in = obs_history * GRID * GRID * 3
    shapes.update({
        "enc_w1": (d_in, ENCODER_HIDDEN),
        "enc_b1": (ENCODER_HIDDEN,),
        "enc_w2": (ENCODER_HIDDEN, FEATURE_DIM),
        "enc_b2": (FEATURE_DIM,),
        "vel_w1": (FEATURE_DIM + ACTION_DIM + 1, VELOCITY_HIDDEN),
        "vel_b1": (VELOCITY_HIDDEN,),
        "vel_w2": (VELOCITY_HIDDEN, VELOCITY_HIDDEN),
        "vel_b2": (VELOCITY_HIDDEN,),
        "vel_w3": (VELOCITY_HIDDEN, ACTION_DIM),
        "vel_b3": (ACTION_DIM,),
    })
    return shapes


class FlowPolicy:
    def __init__(self, variant, params: dict, obs_history: int = 2, ode_steps: int = 10):
        self.variant = Variant.parse(variant)
        self.obs_history = int(obs_history)
        self.ode_steps = int(ode_steps)
        shapes = param_shapes(self.variant, self.obs_history)
        if list(params) != list(shapes):
            raise InvalidValueError(f"parameter names {list(params)} != {list(shapes)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise InvalidValueError(f"{name}: shape {params[name].shape} != {shape}")
            if not np.isfinite(params[name]).all():
                raise NonFiniteError(f"parameter {name} is not finite")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def init(cls, variant, obs_history=2, seed=0, ode_steps=10, adapter=None):
        variant = Variant.parse(variant)
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(variant, obs_history).items():
            if name == "adapter_w":
                params[name] = np.array(adapter[:2], dtype=np.float64) if adapter else _default_adapter()[0]
            elif name == "adapter_b":
                params[name] = np.array(adapter[2], dtype=np.float64) if adapter else _default_adapter()[1]
            elif len(shape) == 2:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(variant, params, obs_history, ode_steps)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, params=None) -> "FlowPolicy":
        params = {k: v.copy() for k, v in (params or self.params).items()}
        return FlowPolicy(self.variant, params, self.obs_history, self.ode_steps)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    # rollout interface
    def act(self, obs_stack, rng, scene=None) -> Action:
        return sample_action(obs_stack, self, rng)


def _default_adapter():
    # mask -> channel 0, depth -> channels 1 and 2
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]), np.zeros(3)


# --------------------------------------------------------------------------- encoder


def pool_observation(obs: Observation) -> np.ndarray:
    """Average-pool one observation onto the ``GRID x GRID`` cell grid, values in [0, 1]."""
    data = obs.data
    if obs.variant is Variant.S2:
        h, w, c = data.shape
        return data.reshape(GRID, h // GRID, GRID, w // GRID, c).mean(axis=(1, 3))
    return kernels.patch_pool_u8(np.ascontiguousarray(data), GRID)


def apply_adapter(planes: np.ndarray, weight, bias) -> np.ndarray:
    """1x1 channel mix ``(..., 2) -> (..., 3)``; commutes with average pooling."""
    return planes @ np.asarray(weight) + np.asarray(bias)


def pool_stack(obs_stack, policy: FlowPolicy) -> np.ndarray:
    if len(obs_stack) != policy.obs_history:
        raise InvalidValueError(f"expected {policy.obs_history} stacked observations, got {len(obs_stack)}")
    for o in obs_stack:
        if o.variant is not policy.variant:
            raise InvalidValueError(f"observation variant {o.variant.value} != policy variant {policy.variant.value}")
    return np.stack([pool_observation(o) for o in obs_stack])


def _encoder_input(pooled, params):
    """``pooled``: (B, n, G, G, C) -> (B, n*G*G*3) plus the adapter input for backprop."""
    if "adapter_w" in params:
        mixed = apply_adapter(pooled, params["adapter_w"], params["adapter_b"])
    else:
        mixed = pooled
    return mixed.reshape(len(pooled), -1)


def _forward(params, pooled, x, s, whiten=None):
    z = _encoder_input(pooled, params)
    if whiten is not None:
        z = (z - whiten[0]) / whiten[1]
    h1 = np.tanh(z @ params["enc_w1"] + params["enc_b1"])
    feat = h1 @ params["enc_w2"] + params["enc_b2"]
    u = np.concatenate([feat, x, s[:, None]], axis=1)
    g1 = np.tanh(u @ params["vel_w1"] + params["vel_b1"])
    g2 = np.tanh(g1 @ params["vel_w2"] + params["vel_b2"])
    v = g2 @ params["vel_w3"] + params["vel_b3"]
    return v, (z, h1, u, g1, g2)


def encode(obs_stack, policy: FlowPolicy) -> np.ndarray:
    pooled = pool_stack(obs_stack, policy)[None]
    p = policy.params
    z = _encoder_input(pooled, p)
    feat = np.tanh(z @ p["enc_w1"] + p["enc_b1"]) @ p["enc_w2"] + p["enc_b2"]
    if not np.isfinite(feat).all():
        raise NonFiniteError("encoder produced non-finite features")
    return feat[0]


def velocity(policy: FlowPolicy, feat: np.ndarray, x: np.ndarray, s) -> np.ndarray:
    """Evaluate the field for a batch of points sharing one feature vector."""
    p = policy.params
    x = np.atleast_2d(x)
    u = np.concatenate([np.broadcast_to(feat, (len(x), len(feat))), x, np.full((len(x), 1), float(s))], axis=1)
    g1 = np.tanh(u @ p["vel_w1"] + p["vel_b1"])
    g2 = np.tanh(g1 @ p["vel_w2"] + p["vel_b2"])
    return g2 @ p["vel_w3"] + p["vel_b3"]


# --------------------------------------------------------------------------- loss


def interpolate(x0, a, s):
    s = np.asarray(s, dtype=np.float64)[..., None]
    return (1.0 - s) * x0 + s * a


def target_velocity(x0, a):
    return a - x0


def loss_and_grads(params, pooled, actions, x0, s, with_grads=True, whiten=None):
    """Flow-matching loss for a batch with explicit noise; optionally its gradients.

    ``whiten = (shift, scale)`` standardizes the encoder input with fixed
    constants (see :func:`input_whitening`).
    """
    xs = interpolate(x0, actions, s)
    v, (z, h1, u, g1, g2) = _forward(params, pooled, xs, s, whiten)
    resid = v - target_velocity(x0, actions)
    per_item = (resid ** 2).sum(axis=1)
    if not np.isfinite(per_item).all():
        bad = int(np.flatnonzero(~np.isfinite(per_item))[0])
        raise NonFiniteError("non-finite flow-matching loss", bad)
    loss = float(per_item.mean())
    if not with_grads:
        return loss, None

    n = len(pooled)
    dv = 2.0 * resid / n
    g = {}
    g["vel_w3"] = g2.T @ dv
    g["vel_b3"] = dv.sum(axis=0)
    dg2 = (dv @ params["vel_w3"].T) * (1.0 - g2 ** 2)
    g["vel_w2"] = g1.T @ dg2
    g["vel_b2"] = dg2.sum(axis=0)
    dg1 = (dg2 @ params["vel_w2"].T) * (1.0 - g1 ** 2)
    g["vel_w1"] = u.T @ dg1
    g["vel_b1"] = dg1.sum(axis=0)
    dfeat = (dg1 @ params["vel_w1"].T)[:, :FEATURE_DIM]
    g["enc_w2"] = h1.T @ dfeat
    g["enc_b2"] = dfeat.sum(axis=0)
    dh1 = (dfeat @ params["enc_w2"].T) * (1.0 - h1 ** 2)
    g["enc_w1"] = z.T @ dh1
    g["enc_b1"] = dh1.sum(axis=0)
    if "adapter_w" in params:
        dz = dh1 @ params["enc_w1"].T
        if whiten is not None:
            dz = dz / whiten[1]
        dz = dz.reshape(n, -1, 3)
        flat_in = pooled.reshape(n, -1, 2)
        g["adapter_w"] = np.einsum("bki,bkj->ij", flat_in, dz)
        g["adapter_b"] = dz.sum(axis=(0, 1))
    grads = {k: g[k] for k in params}
    for k, val in grads.items():
        if not np.isfinite(val).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
    return loss, grads


def fm_loss(batch, policy: FlowPolicy, rng) -> float:
    """Monte-Carlo flow-matching loss over ``batch = [(obs_stack, Action), ...]``."""
    if not batch:
        raise InvalidValueError("fm_loss needs a nonempty batch")
    pooled = np.stack([pool_stack(stack, policy) for stack, _ in batch])
    actions = np.stack([normalize_action(a) for _, a in batch])
    x0 = rng.standard_normal(actions.shape)
    s = rng.random(len(batch))
    return loss_and_grads(policy.params, pooled, actions, x0, s, with_grads=False)[0]


def normalize_action(action) -> np.ndarray:
    arr = action.as_array() if isinstance(action, Action) else np.asarray(action, dtype=np.float64)
    return arr / ACTION_SCALE


def denormalize_action(x: np.ndarray) -> Action:
    a = np.asarray(x) * ACTION_SCALE
    return Action((float(a[0]), float(a[1])), float(a[2])).clipped()


# --------------------------------------------------------------------------- optimization


@dataclass
class OptimizerState:
    momentum: dict = field(default_factory=dict)


def sgd_momentum_update(params, grads, state: OptimizerState, lr: float):
    """In-place heavy-ball update ``m <- 0.9 m + g; p <- p - lr m``."""
    for k, gk in grads.items():
        m = state.momentum.get(k)
        if m is None:
            m = np.zeros_like(gk)
        m = MOMENTUM * m + gk
        state.momentum[k] = m
        params[k] -= lr * m


def grad_step(batch, policy: FlowPolicy, config: TrainConfig, rng, state: OptimizerState | None = None):
    """One momentum-SGD step on ``fm_loss``; returns ``(new_policy, loss, state)``."""
    state = state or OptimizerState()
    pooled = np.stack([pool_stack(stack, policy) for stack, _ in batch])
    actions = np.stack([normalize_action(a) for _, a in batch])
    x0 = rng.standard_normal(actions.shape)
    s = rng.random(len(batch))
    loss, grads = loss_and_grads(policy.params, pooled, actions, x0, s)
    new = policy.copy()
    sgd_momentum_update(new.params, grads, state, config.learning_rate)
    return new, loss, state


# --------------------------------------------------------------------------- sampling


def euler_integrate(field_fn, x0: np.ndarray, n_steps: int) -> np.ndarray:
    """``x_{k+1} = x_k + field(x_k, k/N) / N`` for ``k = 0..N-1``.

    The increments are summed in exact rational arithmetic and the state is
    rounded once per step, so a constant field lands on ``x0 + c`` exactly for
    any ``N`` instead of accumulating ``N`` roundings.
    """
    x = np.array(x0, dtype=np.float64)
    base = [Fraction(float(v)) for v in x.ravel()]
    total = [Fraction(0)] * len(base)
    for k in range(n_steps):
        v = np.asarray(field_fn(x, k / n_steps), dtype=np.float64)
        if not np.isfinite(v).all():
            raise NonFiniteError("non-finite field value", k)
        total = [t + Fraction(float(d)) for t, d in zip(total, v.ravel())]
        x = np.array([float(b + t / n_steps) for b, t in zip(base, total)]).reshape(x.shape)
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite ODE state", k)
    return x


def sample_action(obs_stack, policy: FlowPolicy, rng, ode_steps: int | None = None) -> Action:
    feat = encode(obs_stack, policy)
    x0 = rng.standard_normal(ACTION_DIM)
    x = euler_integrate(lambda x, s: velocity(policy, feat, x, s)[0], x0, ode_steps or policy.ode_steps)
    return denormalize_action(x)


# --------------------------------------------------------------------------- datasets / training


def observation_stacks(episode, variant: Variant, spec: TaskSpec, obs_history: int):
    """Yield ``(obs_stack, action)`` for every step of an episode."""
    obs = []
    targets = episode.targets()
    for t in range(len(targets)):
        perc = episode.perception[t] if variant.needs_masks else None
        if variant.needs_masks and perc is None:
            raise MissingInputError(f"episode {episode.seed} frame {t} has no perception for {variant.value}")
        if variant.needs_depth and perc.depth is None:
            raise MissingInputError(f"episode {episode.seed} frame {t} has no depth for {variant.value}")
        obs.append(build_observation(episode.frames[t], perc and perc.robot, perc and perc.object,
                                     perc and perc.depth, spec, variant))
    for t, action in enumerate(targets):
        stack = [obs[max(0, t - obs_history + 1 + i)] for i in range(obs_history)]
        yield stack, action


def build_dataset(episodes, variant, spec: TaskSpec, obs_history: int):
    """Pooled observation stacks ``(N, n, G, G, C)`` and normalized actions ``(N, 3)``."""
    variant = Variant.parse(variant)
    pooled, actions = [], []
    for ep in episodes:
        for stack, action in observation_stacks(ep, variant, spec, obs_history):
            pooled.append(np.stack([pool_observation(o) for o in stack]))
            actions.append(normalize_action(action))
    if not pooled:
        raise InvalidValueError("training set is empty")
    return np.stack(pooled), np.stack(actions)


def round_to_float32(policy: FlowPolicy) -> FlowPolicy:
    """Snap parameters to float32 so in-memory and checkpointed policies agree exactly."""
    return policy.copy({k: v.astype(np.float32).astype(np.float64) for k, v in policy.params.items()})


def train(episodes, variant, config: TrainConfig = TrainConfig(), spec: TaskSpec = TaskSpec(),
          log_every: int = 50):
    """Fit a policy to expert episodes; returns ``(policy, loss_curve)``.

    ``loss_curve`` holds the mean training loss over each ``log_every`` steps.
    """
    variant = Variant.parse(variant)
    if not episodes:
        raise InvalidValueError("train needs at least one episode")
    pooled, actions = build_dataset(episodes, variant, spec, config.obs_history)
    return train_on_arrays(pooled, actions, variant, config, log_every)


def input_whitening(pooled, params):
    """Per-feature ``(mean, std)`` of the encoder input over a training set.

    The std is floored at ``INPUT_STD_FLOOR`` so features that never vary in
    the demonstrations (an all-background cell, say) are centered but not
    blown up.
    """
    z = _encoder_input(pooled, params)
    return z.mean(axis=0), np.maximum(z.std(axis=0), INPUT_STD_FLOOR)


def fold_whitening(params, whiten):
    """Absorb ``z -> (z - shift) / scale`` into the first encoder layer."""
    shift, scale = whiten
    out = dict(params)
    w = params["enc_w1"] / scale[:, None]
    out["enc_w1"] = w
    out["enc_b1"] = params["enc_b1"] - shift @ w
    return out


def train_on_arrays(pooled, actions, variant, config: TrainConfig, log_every: int = 50):
    variant = Variant.parse(variant)
    init_rng = np.random.default_rng([config.seed, 0])
    batch_rng = np.random.default_rng([config.seed, 1])
    noise_rng = np.random.default_rng([config.seed, 2])
    policy = FlowPolicy.init(variant, config.obs_history, int(init_rng.integers(2**63)), config.ode_steps,
                             config.adapter_1x1)
    params = policy.params
    whiten = input_whitening(pooled, params)
    state = OptimizerState()
    curve, window = [], []
    n = len(pooled)
    for step in range(config.steps):
        idx = batch_rng.integers(n, size=config.batch)
        a = actions[idx]
        x0 = noise_rng.standard_normal(a.shape)
        s = noise_rng.random(len(idx))
        loss, grads = loss_and_grads(params, pooled[idx], a, x0, s, whiten=whiten)
        sgd_momentum_update(params, grads, state, config.learning_rate)
        window.append(loss)
        if len(window) == log_every or step == config.steps - 1:
            curve.append(float(np.mean(window)))
            window = []
            log.debug("step %d loss %.4f", step + 1, curve[-1])
    folded = policy.copy(fold_whitening(params, whiten))
    return round_to_float32(folded), curve


# --------------------------------------------------------------------------- checkpoints

_HEADER = struct.Struct("<4sBHHHHHHHB")


def save_checkpoint(path, policy: FlowPolicy, metadata: dict | None = None):
    path = Path(path)
    has_adapter = policy.variant is Variant.S2
    head = _HEADER.pack(CHECKPOINT_MAGIC, _VARIANT_TAGS[policy.variant], policy.obs_history, policy.ode_steps,
                        GRID, ENCODER_HIDDEN, FEATURE_DIM, VELOCITY_HIDDEN, ACTION_DIM, int(has_adapter))
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in policy.params.values())
    path.write_bytes(head + body)
    meta = dict(metadata or {})
    meta.setdefault("variant", policy.variant.value)
    meta.setdefault("num_parameters", policy.num_parameters())
    metadata_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path):
    """Return ``(policy, metadata)``."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise CodecError("checkpoint too short")
    magic, tag, hist, ode, grid, enc_h, feat, vel_h, d_a, has_adapter = _HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise CodecError(f"bad checkpoint magic {magic!r}")
    variants = {v: k for k, v in _VARIANT_TAGS.items()}
    if tag not in variants:
        raise CodecError(f"unknown variant tag {tag}")
    if (grid, enc_h, feat, vel_h, d_a) != (GRID, ENCODER_HIDDEN, FEATURE_DIM, VELOCITY_HIDDEN, ACTION_DIM):
        raise CodecError("checkpoint dimensions do not match this build")
    variant = variants[tag]
    if bool(has_adapter) != (variant is Variant.S2):
        raise CodecError("adapter flag inconsistent with variant")
    params, pos = {}, _HEADER.size
    for name, shape in param_shapes(variant, hist).items():
        count = int(np.prod(shape))
        chunk = buf[pos:pos + 4 * count]
        if len(chunk) != 4 * count:
            raise CodecError(f"checkpoint truncated in {name}")
        params[name] = np.frombuffer(chunk, "<f4").astype(np.float64).reshape(shape)
        pos += 4 * count
    if pos != len(buf):
        raise CodecError("trailing bytes in checkpoint")
    meta_file = metadata_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return FlowPolicy(variant, params, hist, ode), meta
