"""Episode directories on disk.

Layout of ``episode_<seed>/``::

    frame_<t>.ppm          RGB frame
    mask_robot_<t>.pgm     robot mask (0/255)
    mask_object_<t>.pgm    object mask (0/255)
    depth_<t>.pgm          16-bit depth, plus depth_<t>.range.txt
    actions.jsonl          {"t", "dx", "dy", "grip"} per step, executed actions;
                           demonstrations also carry label_dx/label_dy/label_grip
    meta.json              condition, seed, success, resolution, steps
"""

from __future__ import annotations

import json
import re
from pathlib import Path

from taskobs import codecs
from taskobs.errors import MissingInputError
from taskobs.providers import PerceptionResult, episode_paths, write_perception
from taskobs.simworld import THEME_VERSION, Action, Episode

_FRAME_RE = re.compile(r"^frame_(\d+)\.ppm$")


def episode_dirname(seed: int) -> str:
    return f"episode_{seed}"


def frame_indices(root) -> list:
    """Sorted frame indices ``t`` present as ``frame_<t>.ppm``."""
    out = []
    for p in Path(root).iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def _action_record(t, action: Action, label: Action | None):
    rec = {"t": t, "dx": action.delta[0], "dy": action.delta[1], "grip": action.grip}
    if label is not None:
        rec.update(label_dx=label.delta[0], label_dy=label.delta[1], label_grip=label.grip)
    return rec


def write_episode(root, ep: Episode, resolution: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(ep.frames):
        codecs.write_image(episode_paths(root, t)["frame"], frame)
        if ep.perception[t] is not None:
            write_perception(root, t, ep.perception[t])
    with open(root / "actions.jsonl", "w") as fh:
        for t, a in enumerate(ep.actions):
            label = ep.labels[t] if ep.labels else None
            fh.write(json.dumps(_action_record(t, a, label)) + "\n")
    meta = {"condition": ep.condition, "seed": ep.seed, "success": ep.success, "resolution": resolution,
            "steps": ep.steps, "theme_version": THEME_VERSION}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def read_actions(root):
    path = Path(root) / "actions.jsonl"
    if not path.exists():
        raise MissingInputError(f"missing {path}", path)
    actions, labels = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["t"] != len(actions):
            raise MissingInputError(f"{path}: action records out of order at t={rec['t']}", path)
        actions.append(Action((rec["dx"], rec["dy"]), rec["grip"]))
        if "label_dx" in rec:
            labels.append(Action((rec["label_dx"], rec["label_dy"]), rec["label_grip"]))
    if labels and len(labels) != len(actions):
        raise MissingInputError(f"{path}: labels present on only some steps", path)
    return actions, labels


def read_episode(root, need_masks: bool = True, need_depth: bool = False) -> Episode:
    """Load an episode directory; raises ``MissingInputError`` naming the first missing file."""
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise MissingInputError(f"missing {meta_path}", meta_path)
    meta = json.loads(meta_path.read_text())
    actions, labels = read_actions(root)
    ep = Episode(seed=int(meta["seed"]), condition=meta["condition"], actions=actions, labels=labels,
                 success=bool(meta["success"]), steps=int(meta.get("steps", len(actions))))
    for t in range(len(actions) + 1):
        paths = episode_paths(root, t)
        if not paths["frame"].exists():
            raise MissingInputError(f"missing frame file {paths['frame']}", paths["frame"])
        ep.frames.append(codecs.read_image(paths["frame"]))
        if not need_masks:
            ep.perception.append(None)
            continue
        for key in ("robot", "object") + (("depth",) if need_depth else ()):
            if not paths[key].exists():
                raise MissingInputError(f"missing {key} file {paths[key]}", paths[key])
        depth = codecs.read_depth_raw(paths["depth"]) if paths["depth"].exists() else None
        ep.perception.append(PerceptionResult(codecs.read_mask(paths["robot"]), codecs.read_mask(paths["object"]),
                                              depth))
    return ep


def find_episodes(root) -> list:
    """Episode directories under ``root`` (or ``root`` itself when it is one), sorted by name."""
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
