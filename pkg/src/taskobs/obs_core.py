"""Per-frame canonical observations: segment-repaint (L0) and depth injection (L1).

Rasters are plain numpy arrays:

* image: ``(H, W, 3)`` uint8
* mask: ``(H, W)`` bool (uint8 arrays holding only 0/1 are accepted)
* depth: ``(H, W)`` float64, finite and nonnegative

All functions are pure; they never mutate their inputs.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from taskobs import kernels
from taskobs.errors import (
    EmptyRegionWarning,
    InvalidValueError,
    MissingInputError,
    ShapeMismatchError,
)

RGB = tuple[int, int, int]


class Variant(str, enum.Enum):
    ORG = "ORG"
    L0 = "L0"
    L1 = "L1"
    S2 = "S2"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InvalidValueError(f"unknown variant {value!r}") from None

    @property
    def needs_depth(self) -> bool:
        return self in (Variant.L1, Variant.S2)

    @property
    def needs_masks(self) -> bool:
        return self is not Variant.ORG


def _check_rgb(color, name):
    c = tuple(int(v) for v in color)
    if len(c) != 3 or any(v < 0 or v > 255 for v in c):
        raise InvalidValueError(f"{name} must be an RGB triple in 0..255, got {color!r}")
    return c


@dataclass(frozen=True)
class EntityPalette:
    background: RGB = (0, 0, 0)
    robot: RGB = (255, 0, 0)
    object: RGB = (0, 255, 0)

    def __post_init__(self):
        for name in ("background", "robot", "object"):
            object.__setattr__(self, name, _check_rgb(getattr(self, name), name))
        if len({self.background, self.robot, self.object}) != 3:
            raise InvalidValueError("palette colors must be pairwise distinct")

    def as_array(self) -> np.ndarray:
        return np.array([self.background, self.robot, self.object], dtype=np.uint8)

    @classmethod
    def parse(cls, text: str) -> "EntityPalette":
        """Parse ``"r,g,b;r,g,b;r,g,b"`` (background; robot; object)."""
        parts = [p for p in text.split(";") if p.strip()]
        if len(parts) != 3:
            raise InvalidValueError(f"palette needs three colors, got {text!r}")
        try:
            colors = [tuple(int(v) for v in p.split(",")) for p in parts]
        except ValueError:
            raise InvalidValueError(f"malformed palette {text!r}") from None
        return cls(*colors)

    def format(self) -> str:
        return ";".join(",".join(str(v) for v in c) for c in (self.background, self.robot, self.object))


@dataclass(frozen=True)
class TaskSpec:
    object_label: str = "target object"
    robot_label: str = "robot gripper"
    include_robot_mask: bool = True
    palette: EntityPalette = field(default_factory=EntityPalette)
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.object_label or not self.robot_label:
            raise InvalidValueError("task labels must be non-empty")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise InvalidValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True, eq=False)
class Observation:
    """Policy input for one frame.

    ``data`` is ``(H, W, 3)`` uint8 for ORG/L0/L1 and ``(H, W, 2)`` float64
    (mask plane, normalized depth plane) for S2.
    """

    variant: Variant
    data: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.variant == other.variant
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def __hash__(self):
        return hash((self.variant, self.data.tobytes()))


def as_mask(mask, name="mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype == bool:
        return m
    if not np.isin(m, (0, 1)).all():
        raise InvalidValueError(f"{name} must contain only 0/1")
    return m.astype(bool)


def as_image(image, name="image") -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InvalidValueError(f"{name} must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidValueError(f"{name} must be at least 1x1")
    return img


def as_depth(depth, name="depth") -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise InvalidValueError(f"{name} must be 2-D, got shape {d.shape}")
    if not np.isfinite(d).all() or (d < 0).any():
        raise InvalidValueError(f"{name} values must be finite and >= 0")
    return d


def _same_hw(what, a, b):
    if a.shape[:2] != b.shape[:2]:
        raise ShapeMismatchError(what, a.shape[:2], b.shape[:2])


def mask_union(masks) -> np.ndarray:
    """Pixelwise OR of one or more equally sized masks."""
    masks = [as_mask(m) for m in masks]
    if not masks:
        raise InvalidValueError("mask_union needs at least one mask")
    out = masks[0].copy()
    for m in masks[1:]:
        _same_hw("mask_union", masks[0], m)
        out |= m
    return out


def background_mask(robot, obj) -> np.ndarray:
    return ~mask_union([robot, obj])


def repaint_l0(robot, obj, palette: EntityPalette = EntityPalette()) -> np.ndarray:
    """Label-colored canvas; painted background, then robot, then object on top."""
    robot = as_mask(robot, "robot")
    obj = as_mask(obj, "object")
    _same_hw("repaint_l0", robot, obj)
    return kernels.repaint(robot, obj, palette.as_array())


def normalize_depth_in_mask(depth, obj, epsilon: float = 1e-6) -> np.ndarray:
    """Min-max normalize ``depth`` over the object region, zero elsewhere.

    An empty region yields an all-zero map and emits ``EmptyRegionWarning``.
    """
    if not epsilon > 0:
        raise InvalidValueError(f"epsilon must be positive, got {epsilon}")
    depth = as_depth(depth)
    obj = as_mask(obj, "object")
    _same_hw("normalize_depth_in_mask", depth, obj)
    out, empty = kernels.normalize_depth(np.ascontiguousarray(depth), obj, float(epsilon))
    if empty:
        warnings.warn("object mask is empty; depth region left at zero", EmptyRegionWarning, stacklevel=2)
    return out


def fuse_l1(l0, obj, depth_norm) -> np.ndarray:
    """Overwrite the object region of ``l0`` with 8-bit tiled normalized depth."""
    l0 = as_image(l0, "l0")
    obj = as_mask(obj, "object")
    d = np.asarray(depth_norm, dtype=np.float64)
    _same_hw("fuse_l1", l0, obj)
    _same_hw("fuse_l1", l0, d)
    if not np.isfinite(d).all() or (d < 0).any() or (d > 1).any():
        raise InvalidValueError("depth_norm must lie in [0, 1]; was it normalized?")
    return kernels.fuse(np.ascontiguousarray(l0), obj, np.ascontiguousarray(d))


def mask_iou(predicted, truth) -> float:
    p = as_mask(predicted, "predicted")
    t = as_mask(truth, "truth")
    _same_hw("mask_iou", p, t)
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


def build_observation(frame, robot, obj, depth, spec: TaskSpec, variant) -> Observation:
    variant = Variant.parse(variant)
    frame = as_image(frame, "frame")
    if variant is Variant.ORG:
        return Observation(variant, frame)
    robot = as_mask(robot, "robot")
    obj = as_mask(obj, "object")
    _same_hw("build_observation", frame, robot)
    _same_hw("build_observation", frame, obj)
    if variant.needs_depth:
        if depth is None:
            raise MissingInputError(f"variant {variant.value} requires a depth map")
        depth = as_depth(depth)
        _same_hw("build_observation", frame, depth)
    if not spec.include_robot_mask:
        robot = np.zeros_like(robot)

    if variant is Variant.S2:
        norm = normalize_depth_in_mask(depth, obj, spec.epsilon)
        return Observation(variant, np.stack([obj.astype(np.float64), norm], axis=-1))

    palette = spec.palette.as_array()
    if variant is Variant.L0:
        return Observation(variant, kernels.repaint(robot, obj, palette))
    img, empty = kernels.canonicalize(robot, obj, np.ascontiguousarray(depth), palette, float(spec.epsilon))
    if empty:
        warnings.warn("object mask is empty; depth region left at zero", EmptyRegionWarning, stacklevel=2)
    return Observation(variant, img)
