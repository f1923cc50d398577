"""Sources of robot/object masks and depth for a frame.

Three interchangeable providers return the same ``PerceptionResult`` shape:
the simulator oracle, pre-computed files in the episode layout, and a remote
service speaking the wire protocol in :mod:`taskobs.wire`. ``degrade_masks``
perturbs any result to emulate an imperfect segmenter.
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from taskobs import codecs
from taskobs.errors import (
    InvalidValueError,
    MalformedResponseError,
    MissingInputError,
    ProviderError,
    ProviderTimeoutError,
    ShapeMismatchError,
)
from taskobs.obs_core import TaskSpec, as_image, as_mask


@dataclass(frozen=True, eq=False)
class PerceptionRequest:
    frame_id: int
    frame: np.ndarray
    spec: TaskSpec = field(default_factory=TaskSpec)
    want_depth: bool = True


@dataclass(eq=False)
class PerceptionResult:
    robot: np.ndarray
    object: np.ndarray
    depth: np.ndarray | None = None
    latency: dict = field(default_factory=dict)

    def __post_init__(self):
        self.robot = as_mask(self.robot, "robot")
        self.object = as_mask(self.object, "object")
        if self.robot.shape != self.object.shape:
            raise ShapeMismatchError("PerceptionResult masks", self.robot.shape, self.object.shape)
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.shape != self.robot.shape:
                raise ShapeMismatchError("PerceptionResult depth", self.depth.shape, self.robot.shape)
        if any(v < 0 for v in self.latency.values()):
            raise InvalidValueError("latency must be nonnegative")

    @property
    def shape(self):
        return self.robot.shape

    def same_rasters(self, other: "PerceptionResult") -> bool:
        """Raster equality; latency is deliberately ignored."""
        if not (np.array_equal(self.robot, other.robot) and np.array_equal(self.object, other.object)):
            return False
        if (self.depth is None) != (other.depth is None):
            return False
        return self.depth is None or np.array_equal(self.depth, other.depth)

    __eq__ = same_rasters
    __hash__ = None


@dataclass(frozen=True)
class MaskDegradation:
    """Segmentation-error model.

    Masks are dilated, then eroded, then each pixel is flipped independently
    with probability ``flip_rate``. Flips are restricted to pixels within
    ``band_radius`` of a mask boundary when it is set, else they apply to the
    whole frame.
    """

    dilation_radius: int = 0
    erosion_radius: int = 0
    flip_rate: float = 0.0
    seed: int = 0
    band_radius: int | None = None

    def __post_init__(self):
        if self.dilation_radius < 0 or self.erosion_radius < 0:
            raise InvalidValueError("morphology radii must be >= 0")
        if not 0.0 <= self.flip_rate <= 1.0:
            raise InvalidValueError(f"flip_rate must be in [0, 1], got {self.flip_rate}")
        if self.band_radius is not None and self.band_radius < 0:
            raise InvalidValueError("band_radius must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.dilation_radius == 0 and self.erosion_radius == 0 and self.flip_rate == 0.0

    def to_dict(self):
        return {"dilation_radius": self.dilation_radius, "erosion_radius": self.erosion_radius,
                "flip_rate": self.flip_rate, "seed": self.seed, "band_radius": self.band_radius}


def _disk(radius):
    r = np.arange(-radius, radius + 1)
    return r[:, None] ** 2 + r[None, :] ** 2 <= radius * radius


def _degrade_one(mask, deg: MaskDegradation, rng):
    m = mask.copy()
    if deg.dilation_radius:
        m = ndimage.binary_dilation(m, structure=_disk(deg.dilation_radius))
    if deg.erosion_radius:
        m = ndimage.binary_erosion(m, structure=_disk(deg.erosion_radius))
    flips = rng.random(m.shape) < deg.flip_rate
    if deg.band_radius is not None:
        s = _disk(max(deg.band_radius, 1))
        # the frame edge is not a mask boundary, hence border_value=1 for erosion
        band = ndimage.binary_dilation(m, structure=s) & ~ndimage.binary_erosion(m, structure=s, border_value=1)
        flips &= band
    return m ^ flips


def degrade_masks(result: PerceptionResult, degradation: MaskDegradation) -> PerceptionResult:
    if degradation.is_identity:
        return PerceptionResult(result.robot.copy(), result.object.copy(),
                                None if result.depth is None else result.depth.copy(), dict(result.latency))
    rng = np.random.default_rng(degradation.seed)
    robot = _degrade_one(result.robot, degradation, rng)
    obj = _degrade_one(result.object, degradation, rng)
    return PerceptionResult(robot, obj, result.depth, dict(result.latency))


def oracle_provide(request: PerceptionRequest, scene) -> PerceptionResult:
    from taskobs import simworld

    frame = as_image(request.frame)
    t0 = time.perf_counter()
    expected = simworld.render(scene, frame.shape[0])
    if frame.shape != expected.shape or not np.array_equal(frame, expected):
        raise ProviderError(f"frame {request.frame_id} does not correspond to the given scene")
    res = simworld.ground_truth(scene, frame.shape[0])
    if not request.want_depth:
        res.depth = None
    res.latency = {"oracle": time.perf_counter() - t0}
    return res


def episode_paths(root, t: int) -> dict:
    root = Path(root)
    return {
        "frame": root / f"frame_{t}.ppm",
        "robot": root / f"mask_robot_{t}.pgm",
        "object": root / f"mask_object_{t}.pgm",
        "depth": root / f"depth_{t}.pgm",
    }


def file_provide(request: PerceptionRequest, root) -> PerceptionResult:
    """Read masks (and depth, when present) for frame ``request.frame_id`` of an episode directory.

    Depth comes back as relative depth in [0, 1]; a missing depth file yields
    ``depth=None`` and the variant that needs it fails downstream.
    """
    t0 = time.perf_counter()
    paths = episode_paths(root, int(request.frame_id))
    for key in ("robot", "object"):
        if not paths[key].exists():
            raise MissingInputError(f"missing {key} mask file {paths[key]}", paths[key])
    robot = codecs.read_mask(paths["robot"])
    obj = codecs.read_mask(paths["object"])
    depth = None
    if request.want_depth and paths["depth"].exists():
        depth = codecs.read_depth(paths["depth"])
    hw = np.asarray(request.frame).shape[:2]
    for name, raster in (("robot", robot), ("object", obj), ("depth", depth)):
        if raster is not None and raster.shape != hw:
            raise ShapeMismatchError(f"file_provide {name}", raster.shape, hw)
    return PerceptionResult(robot, obj, depth, {"files": time.perf_counter() - t0})


def write_perception(root, t: int, result: PerceptionResult):
    paths = episode_paths(root, t)
    codecs.write_mask(paths["robot"], result.robot)
    codecs.write_mask(paths["object"], result.object)
    if result.depth is not None:
        codecs.write_depth(paths["depth"], result.depth)


def parse_endpoint(endpoint):
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1])
    host, _, port = str(endpoint).rpartition(":")
    if not host or not port.isdigit():
        raise InvalidValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def remote_provide(request: PerceptionRequest, endpoint, timeout: float = 5.0, sock=None) -> PerceptionResult:
    """Query a perception service over the framed binary protocol.

    ``sock`` lets a worker reuse one open connection for many frames.
    """
    from taskobs import wire

    frame = as_image(request.frame)
    h, w = frame.shape[:2]
    msg = wire.encode_request(request.frame_id, frame, request.spec.object_label,
                              request.spec.robot_label, request.want_depth)
    t0 = time.perf_counter()
    own = sock is None
    try:
        if own:
            sock = socket.create_connection(parse_endpoint(endpoint), timeout=timeout)
        else:
            sock.settimeout(timeout)
        wire.send_message(sock, msg)
        reply = wire.recv_message(sock)
    except socket.timeout as exc:
        raise ProviderTimeoutError(f"no response within {timeout}s from {endpoint}") from exc
    except OSError as exc:
        raise ProviderError(f"connection to {endpoint} failed: {exc}") from exc
    finally:
        if own and sock is not None:
            sock.close()
    elapsed = time.perf_counter() - t0
    resp = wire.decode_response(reply, w, h)
    if resp.frame_id != request.frame_id:
        raise MalformedResponseError(f"response frame id {resp.frame_id} != request {request.frame_id}")
    depth = None if resp.depth is None else codecs.samples_to_relative(resp.depth)
    return PerceptionResult(resp.robot, resp.object, depth, {"remote": elapsed})
