"""``taskobs`` command line.

Exit codes: 0 success, 1 environment or configuration error, 2 data error.
Relative paths are resolved against ``--workdir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from taskobs import codecs, episode_io, evalharness, policy, simworld
from taskobs.errors import InvalidValueError, MissingInputError, TaskObsError
from taskobs.obs_core import EntityPalette, TaskSpec, Variant, build_observation
from taskobs.providers import MaskDegradation, PerceptionRequest, episode_paths, file_provide, remote_provide
from taskobs.seeding import derive_seed

log = logging.getLogger("taskobs")

EXIT_OK = 0
EXIT_ENV = 1
EXIT_DATA = 2


class EnvError(Exception):
    """Configuration or environment problem (exit 1)."""


class DataError(Exception):
    """Bad or missing input data (exit 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ENV, f"{self.prog}: error: {message}\n")


def _csv(text):
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _int_list(text):
    try:
        return [int(t) for t in _csv(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taskobs", description="Task-aware observation canonicalization, training and evaluation.")
    p.add_argument("--workdir", default=".", help="root that relative paths are resolved against (default: .)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("canonize", help="write L0/L1/S2 observations for an episode directory",
                       description="Build canonical observations for every frame of an episode directory.")
    c.add_argument("--input", required=True, help="episode directory (frame_<t>.ppm, mask_*_<t>.pgm, depth_<t>.pgm)")
    c.add_argument("--output", help="directory for canon_<variant>_<t> files (default: the input directory)")
    c.add_argument("--variant", required=True, choices=["L0", "L1", "S2"], help="observation variant")
    c.add_argument("--palette", default=EntityPalette().format(),
                   help="background;robot;object colors as 'r,g,b;r,g,b;r,g,b' (default: %(default)s)")
    c.add_argument("--epsilon", type=float, default=1e-6, help="depth normalization epsilon (default: %(default)s)")
    c.add_argument("--target-only", action="store_true", help="drop the robot mask from the observation")
    c.add_argument("--provider", choices=["files", "remote"], default="files",
                   help="where masks and depth come from (default: %(default)s)")
    c.add_argument("--endpoint", help="host:port of the perception service (with --provider remote)")
    c.add_argument("--timeout", type=float, default=5.0, help="remote provider timeout in seconds (default: %(default)s)")
    c.add_argument("--jobs", type=_positive, default=1, help="frames processed concurrently (default: %(default)s)")

    g = sub.add_parser("gen-demos", help="write scripted-expert demonstrations",
                       description="Generate expert demonstrations in the episode layout.")
    g.add_argument("--episodes", type=_positive, required=True, help="number of episodes")
    g.add_argument("--condition", default="ID", choices=simworld.CONDITIONS, help="visual condition (default: ID)")
    g.add_argument("--seed", type=int, default=0, help="demonstration seed stream (default: %(default)s)")
    g.add_argument("--out", required=True, help="directory receiving episode_<seed>/ subdirectories")

    t = sub.add_parser("train", help="train a flow-matching policy on demonstrations",
                       description="Train a policy on episode directories and write a checkpoint.")
    t.add_argument("--demos", required=True, help="directory of episode_<seed>/ subdirectories")
    t.add_argument("--variant", required=True, choices=[v.value for v in Variant], help="observation variant")
    t.add_argument("--config", help="JSON file with TrainConfig fields (steps, batch, learning_rate, seed, ...)")
    t.add_argument("--target-only", action="store_true", help="drop the robot mask from observations")
    t.add_argument("--out", required=True, help="checkpoint path; metadata goes to <out>.json")

    e = sub.add_parser("eval", help="roll out a checkpoint under visual conditions",
                       description="Evaluate a checkpoint and persist per-rollout results.")
    e.add_argument("--checkpoint", required=True, help="policy checkpoint written by train")
    e.add_argument("--conditions", type=_csv, default=list(simworld.CONDITIONS),
                   help="comma-separated conditions (default: all)")
    e.add_argument("--rollouts", type=_positive, default=20, help="rollouts per seed and condition (default: %(default)s)")
    e.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated evaluation seeds (default: 0)")
    e.add_argument("--max-steps", type=_positive, default=100, help="step budget per rollout (default: %(default)s)")
    e.add_argument("--flip-rate", type=float, default=0.0, help="mask pixel flip probability (default: 0)")
    e.add_argument("--dilate", type=int, default=0, help="mask dilation radius in pixels (default: 0)")
    e.add_argument("--erode", type=int, default=0, help="mask erosion radius in pixels (default: 0)")
    e.add_argument("--out", required=True, help="results directory (raw.jsonl, table.*, configs.json)")
    e.add_argument("--jobs", type=_positive, default=1, help="rollout worker processes (default: %(default)s)")

    r = sub.add_parser("report", help="format persisted results",
                       description="Recompute and print the result table from raw.jsonl.")
    r.add_argument("--results", required=True, help="results directory written by eval")
    r.add_argument("--format", choices=["text", "csv", "json"], default="text", help="output format (default: text)")

    s = sub.add_parser("serve-echo", help="serve an episode directory over the perception wire protocol",
                       description="Answer perception requests from files until interrupted.")
    s.add_argument("--source", required=True, help="episode directory to serve")
    s.add_argument("--port", type=int, default=0, help="TCP port, 0 for any free port (default: 0)")
    s.add_argument("--host", default="127.0.0.1", help="bind address (default: %(default)s)")
    s.add_argument("--delay", type=float, default=0.0, help="seconds to wait before each reply (default: 0)")
    return p


# --------------------------------------------------------------------------- subcommands


def _canon_path(out: Path, variant: Variant, t: int) -> Path:
    ext = "npy" if variant is Variant.S2 else "ppm"
    return out / f"canon_{variant.value}_{t}.{ext}"


def write_canonical(path: Path, obs):
    if obs.variant is Variant.S2:
        with open(path, "wb") as fh:
            np.save(fh, obs.data, allow_pickle=False)
    else:
        codecs.write_image(path, obs.data)


def cmd_canonize(args, wd: Path) -> int:
    src = wd / args.input
    out = wd / (args.output or args.input)
    variant = Variant.parse(args.variant)
    try:
        spec = TaskSpec(include_robot_mask=not args.target_only, palette=EntityPalette.parse(args.palette),
                        epsilon=args.epsilon)
    except (InvalidValueError, ValueError) as exc:
        raise EnvError(str(exc)) from None
    if args.provider == "remote" and not args.endpoint:
        raise EnvError("--provider remote needs --endpoint")
    if not src.is_dir():
        raise DataError(f"input directory {src} does not exist")
    frames = episode_io.frame_indices(src)
    if not frames:
        raise DataError(f"no frame_<t>.ppm files in {src}")
    out.mkdir(parents=True, exist_ok=True)

    def one(t):
        frame = codecs.read_image(episode_paths(src, t)["frame"])
        req = PerceptionRequest(t, frame, spec, want_depth=variant.needs_depth)
        if args.provider == "files":
            if variant.needs_depth and not episode_paths(src, t)["depth"].exists():
                path = episode_paths(src, t)["depth"]
                raise MissingInputError(f"missing depth file {path}", path)
            res = file_provide(req, src)
        else:
            res = remote_provide(req, args.endpoint, timeout=args.timeout)
        t0 = time.perf_counter()
        obs = build_observation(frame, res.robot, res.object, res.depth, spec, variant)
        canon = time.perf_counter() - t0
        write_canonical(_canon_path(out, variant, t), obs)
        return sum(res.latency.values()), canon

    def guarded(t):
        try:
            return t, one(t), None
        except (TaskObsError, OSError) as exc:
            return t, None, exc

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(guarded, frames))
    failures = [(t, exc) for t, _, exc in results if exc is not None]
    timings = np.array([r for _, r, exc in results if exc is None]) * 1e3
    if len(timings):
        print(f"canonized {len(timings)}/{len(frames)} frames as {variant.value}; "
              f"provider ms mean {timings[:, 0].mean():.3f} max {timings[:, 0].max():.3f}; "
              f"canonicalize ms mean {timings[:, 1].mean():.3f} max {timings[:, 1].max():.3f}")
    if failures:
        t, exc = failures[0]
        print(f"error: frame {t}: {exc}", file=sys.stderr)
        print(f"{len(failures)} frame(s) failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_gen_demos(args, wd: Path) -> int:
    out = wd / args.out
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        seed = derive_seed(args.seed, "demo", i)
        ep = simworld.expert_episode(args.condition, seed)
        if not ep.success:
            raise AssertionError(f"scripted expert failed on seed {seed}")
        episode_io.write_episode(out / episode_io.episode_dirname(seed), ep, simworld.RESOLUTION)
    print(f"wrote {args.episodes} episode(s) to {out}")
    return EXIT_OK


def _load_train_config(path: Path | None) -> policy.TrainConfig:
    if path is None:
        return policy.TrainConfig()
    try:
        return policy.TrainConfig.from_dict(json.loads(path.read_text()))
    except FileNotFoundError:
        raise EnvError(f"config file {path} not found") from None
    except (ValueError, TypeError, InvalidValueError) as exc:
        raise EnvError(f"bad config file {path}: {exc}") from None


def cmd_train(args, wd: Path) -> int:
    variant = Variant.parse(args.variant)
    config = _load_train_config(wd / args.config if args.config else None)
    dirs = episode_io.find_episodes(wd / args.demos)
    if not dirs:
        raise DataError(f"no episode directories under {wd / args.demos}")
    episodes = [episode_io.read_episode(d, variant.needs_masks, variant.needs_depth) for d in dirs]
    spec = TaskSpec(include_robot_mask=not args.target_only)
    pol, curve = policy.train(episodes, variant, config, spec)
    out = wd / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"config": config.to_dict(), "seed": config.seed, "loss_curve": curve,
            "include_robot_mask": spec.include_robot_mask, "episodes": [d.name for d in dirs]}
    policy.save_checkpoint(out, pol, meta)
    print(f"final loss {curve[-1] if curve else float('nan'):.6f}")
    print(f"checkpoint {out} ({pol.num_parameters()} parameters)")
    return EXIT_OK


def cmd_eval(args, wd: Path) -> int:
    ckpt = wd / args.checkpoint
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    pol, meta = policy.load_checkpoint(ckpt)
    unknown = [c for c in args.conditions if c not in simworld.THEMES]
    if unknown or not args.conditions:
        raise EnvError(f"unknown or empty conditions {unknown}; expected from {list(simworld.CONDITIONS)}")
    try:
        deg = MaskDegradation(args.dilate, args.erode, args.flip_rate)
    except InvalidValueError as exc:
        raise EnvError(str(exc)) from None
    cfg = evalharness.ExperimentConfig(
        name=Path(args.out).name, variants=(pol.variant.value,), conditions=tuple(args.conditions),
        seeds=tuple(args.seeds), rollouts_per_seed=args.rollouts, max_steps=args.max_steps,
        include_robot_mask=bool(meta.get("include_robot_mask", True)),
        degradation=None if deg.is_identity else deg)
    records = []
    for seed in cfg.seeds:
        records += evalharness.evaluate_policy(pol, cfg, pol.variant.value, seed, cfg.conditions, cfg.spec(),
                                               cfg.degradation, args.jobs)
    table = evalharness.table_from_records(records, cfg.conditions)
    evalharness.persist(wd / args.out, cfg, records, table)
    sys.stdout.write(evalharness.emit_report(table, "text"))
    return EXIT_OK


def cmd_report(args, wd: Path) -> int:
    results = wd / args.results
    try:
        records = evalharness.load_records(results)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    if not records:
        raise DataError(f"{results / 'raw.jsonl'} holds no records")
    sys.stdout.write(evalharness.emit_report(evalharness.load_results(results), args.format))
    return EXIT_OK


def cmd_serve_echo(args, wd: Path) -> int:
    from taskobs.wire import EchoServer

    src = wd / args.source
    if not src.is_dir():
        raise DataError(f"source directory {src} does not exist")
    try:
        server = EchoServer(src, args.host, args.port, args.delay)
    except OSError as exc:
        raise EnvError(f"cannot bind {args.host}:{args.port}: {exc}") from None
    print(f"serving {src} on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


COMMANDS = {
    "canonize": cmd_canonize,
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "serve-echo": cmd_serve_echo,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    wd = Path(args.workdir)
    if not wd.is_dir():
        print(f"error: workdir {wd} is not a directory", file=sys.stderr)
        return EXIT_ENV
    try:
        return COMMANDS[args.command](args, wd)
    except EnvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (DataError, TaskObsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
