"""Task-aware observation canonicalization for visuomotor policies."""

from taskobs.obs_core import (
    EntityPalette,
    Observation,
    TaskSpec,
    Variant,
    build_observation,
    mask_iou,
)

__version__ = "0.1.0"

__all__ = ["EntityPalette", "Observation", "TaskSpec", "Variant", "build_observation", "mask_iou", "__version__"]
