"""Train-and-evaluate experiments across observation variants and appearance shifts.

Every random quantity is drawn from a named stream keyed by the experiment
seed, so demonstrations, training and evaluation never share randomness:

* demonstrations: ``derive_seed(seed, "demo", i)``, always in the ID condition
* training: ``derive_seed(seed, "train")``
* evaluation episodes: ``derive_seed(seed, "eval", r)``, shared by every
  variant and condition so rows are paired comparisons
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from taskobs import simworld
from taskobs.errors import InvalidValueError
from taskobs.obs_core import EntityPalette, TaskSpec, Variant
from taskobs.policy import TrainConfig, train
from taskobs.providers import MaskDegradation
from taskobs.seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    variants: tuple = ("ORG", "L0", "L1")
    conditions: tuple = ("ID",) + simworld.OOD_CONDITIONS
    seeds: tuple = (0, 1, 2)
    rollouts_per_seed: int = 20
    demos: int = 50
    max_steps: int = 100
    include_robot_mask: bool = True
    degradation: MaskDegradation | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    palette: EntityPalette = field(default_factory=EntityPalette)
    epsilon: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(Variant.parse(v).value for v in self.variants))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.variants or not self.conditions or not self.seeds:
            raise InvalidValueError("variants, conditions and seeds must be nonempty")
        for c in self.conditions:
            if c not in simworld.THEMES:
                raise InvalidValueError(f"unknown condition {c!r}")
        if self.rollouts_per_seed < 1 or self.demos < 1 or self.max_steps < 1:
            raise InvalidValueError("rollouts_per_seed, demos and max_steps must be >= 1")

    def spec(self, include_robot_mask: bool | None = None) -> TaskSpec:
        irm = self.include_robot_mask if include_robot_mask is None else include_robot_mask
        return TaskSpec(include_robot_mask=irm, palette=self.palette, epsilon=self.epsilon)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "variants": list(self.variants),
            "conditions": list(self.conditions),
            "seeds": list(self.seeds),
            "rollouts_per_seed": self.rollouts_per_seed,
            "demos": self.demos,
            "max_steps": self.max_steps,
            "include_robot_mask": self.include_robot_mask,
            "degradation": None if self.degradation is None else self.degradation.to_dict(),
            "train": self.train.to_dict(),
            "palette": self.palette.format(),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidValueError(f"unknown experiment config fields: {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if d.get("degradation") is not None:
            d["degradation"] = MaskDegradation(**d["degradation"])
        if isinstance(d.get("palette"), str):
            d["palette"] = EntityPalette.parse(d["palette"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- results


@dataclass
class Row:
    setting: str
    condition: str
    per_seed: dict  # training seed -> success rate in percent
    iou: float | None = None
    failed: bool = False

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_seed.values()))) if self.per_seed else float("nan")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    conditions: tuple = ()

    def settings(self) -> list:
        seen = []
        for r in self.rows:
            if r.setting not in seen:
                seen.append(r.setting)
        return seen

    def cell(self, setting, condition) -> Row | None:
        for r in self.rows:
            if r.setting == setting and r.condition == condition:
                return r
        return None

    def rate(self, setting, condition) -> float:
        return self.cell(setting, condition).mean

    def ood_mean(self, setting, prefix: str = "OOD") -> float:
        cells = [r.mean for r in self.rows if r.setting == setting and r.condition.startswith(prefix)]
        return float(np.mean(cells)) if cells else float("nan")

    def __eq__(self, other):
        if not isinstance(other, ResultTable):
            return NotImplemented
        return table_to_dict(self) == table_to_dict(other)


def table_from_records(records, conditions=None) -> ResultTable:
    """Aggregate per-rollout records into per-seed success rates."""
    cells = {}
    order = []
    for rec in records:
        key = (rec["setting"], rec["condition"])
        if key not in cells:
            cells[key] = {"seeds": {}, "iou": [], "failed": False}
            order.append(key)
        c = cells[key]
        if rec.get("error"):
            c["failed"] = True
            c["seeds"].setdefault(rec["seed"], [])
            continue
        c["seeds"].setdefault(rec["seed"], []).append(bool(rec["success"]))
        if rec.get("iou") is not None:
            c["iou"].append(rec["iou"])
    rows = []
    for key in order:
        c = cells[key]
        per_seed = {seed: 100.0 * float(np.mean(v)) for seed, v in c["seeds"].items() if v}
        iou = float(np.mean(c["iou"])) if c["iou"] else None
        rows.append(Row(key[0], key[1], per_seed, iou, c["failed"]))
    if conditions is None:
        conditions = tuple(dict.fromkeys(k[1] for k in order))
    return ResultTable(rows, tuple(conditions))


# --------------------------------------------------------------------------- running


def demo_seeds(config: ExperimentConfig, seed: int):
    return [derive_seed(seed, "demo", i) for i in range(config.demos)]


def eval_seeds(config: ExperimentConfig, seed: int):
    return [derive_seed(seed, "eval", r) for r in range(config.rollouts_per_seed)]


def generate_demos(config: ExperimentConfig, seed: int):
    episodes = [simworld.expert_episode("ID", s) for s in demo_seeds(config, seed)]
    assert all(ep.condition == "ID" for ep in episodes), "OOD conditions must never contribute demonstrations"
    failed = [ep.seed for ep in episodes if not ep.success]
    if failed:
        raise RuntimeError(f"expert failed on demo seeds {failed}")
    return episodes


def train_policy(config: ExperimentConfig, variant, seed: int, episodes, include_robot_mask=None):
    tc = dataclasses.replace(config.train, seed=derive_seed(seed, "train"))
    policy, curve = train(episodes, variant, tc, config.spec(include_robot_mask))
    return policy, curve


def _rollout_job(args):
    policy, variant, condition, ep_seed, max_steps, spec, degradation = args
    ep = simworld.rollout(policy, variant, condition, ep_seed, max_steps=max_steps, spec=spec,
                          degradation=degradation, record=False)
    iou = None
    if ep.iou:
        iou = float(np.mean([(r + o) / 2.0 for r, o in ep.iou]))
    return {"success": ep.success, "steps": ep.steps, "iou": iou, "error": ep.diagnostic or None}


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args, chunksize=max(1, len(jobs_args) // (4 * jobs))))


def evaluate_policy(policy, config: ExperimentConfig, setting: str, seed: int, conditions=None,
                    spec: TaskSpec | None = None, degradation=None, jobs: int = 1):
    """Roll out ``policy`` on every condition; returns per-rollout records."""
    spec = spec or config.spec()
    conditions = conditions or config.conditions
    ep_seeds = eval_seeds(config, seed)
    args = [(policy, policy.variant, cond, s, config.max_steps, spec, degradation)
            for cond in conditions for s in ep_seeds]
    outs = _map(_rollout_job, args, jobs)
    records = []
    for (_, variant, cond, s, *_), out in zip(args, outs):
        records.append({"setting": setting, "variant": variant.value, "condition": cond, "seed": seed,
                        "episode_seed": s, **out})
    return records


def _failure_records(setting, variant, conditions, seed, exc):
    msg = f"{type(exc).__name__}: {exc}"
    log.error("setting %s seed %d failed: %s", setting, seed, msg)
    return [{"setting": setting, "variant": variant, "condition": c, "seed": seed, "episode_seed": None,
             "success": False, "steps": 0, "iou": None, "error": msg} for c in conditions]


class _Runner:
    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        self.config = config
        self.jobs = jobs
        self._demos = {}
        self.records = []
        self.loss_curves = {}

    def demos(self, seed):
        if seed not in self._demos:
            self._demos[seed] = generate_demos(self.config, seed)
        return self._demos[seed]

    def run_cell(self, setting, variant, seed, conditions, include_robot_mask=None, levels=None):
        """Train one policy and evaluate it; ``levels`` maps setting labels to degradations."""
        cfg = self.config
        spec = cfg.spec(include_robot_mask)
        levels = levels or {setting: cfg.degradation}
        try:
            policy, curve = train_policy(cfg, variant, seed, self.demos(seed), include_robot_mask)
            self.loss_curves[f"{setting}/{seed}"] = curve
        except Exception as exc:  # noqa: BLE001 - persisted as a failure marker
            for label in levels:
                self.records += _failure_records(label, Variant.parse(variant).value, conditions, seed, exc)
            return
        for label, deg in levels.items():
            try:
                self.records += evaluate_policy(policy, cfg, label, seed, conditions, spec, deg, self.jobs)
            except Exception as exc:  # noqa: BLE001
                self.records += _failure_records(label, policy.variant.value, conditions, seed, exc)


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ResultTable:
    runner = _Runner(config, jobs)
    for variant in config.variants:
        for seed in config.seeds:
            runner.run_cell(variant, variant, seed, config.conditions)
    table = table_from_records(runner.records, config.conditions)
    if out_dir is not None:
        persist(out_dir, config, runner.records, table, runner.loss_curves)
    return table


def robot_mask_ablation(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ResultTable:
    """L0 with and without the robot mask; both settings share demonstrations and seeds."""
    runner = _Runner(config, jobs)
    for label, irm in (("Target-only", False), ("Target+Robot", True)):
        for seed in config.seeds:
            runner.run_cell(label, Variant.L0, seed, config.conditions, include_robot_mask=irm)
    table = table_from_records(runner.records, config.conditions)
    if out_dir is not None:
        persist(out_dir, config, runner.records, table, runner.loss_curves)
    return table


def level_label(deg: MaskDegradation | None) -> str:
    if deg is None or deg.is_identity:
        return "clean"
    parts = [f"flip={deg.flip_rate:g}"]
    if deg.dilation_radius:
        parts.append(f"dil={deg.dilation_radius}")
    if deg.erosion_radius:
        parts.append(f"ero={deg.erosion_radius}")
    return ",".join(parts)


def mask_quality_sweep(config: ExperimentConfig, levels, out_dir=None, jobs: int = 1) -> ResultTable:
    """Evaluate clean-trained policies with increasingly corrupted masks at test time.

    One row per (variant, level) with the mean mask IoU observed during the
    rollouts. The clean level is the base run.
    """
    levels = list(levels)
    if len(levels) < 2 or not any(lv.is_identity for lv in levels):
        raise InvalidValueError("mask_quality_sweep needs >= 2 levels including the zero level")
    runner = _Runner(config, jobs)
    for variant in config.variants:
        if not Variant.parse(variant).needs_masks:
            raise InvalidValueError("mask_quality_sweep needs mask-based variants")
        for seed in config.seeds:
            labelled = {}
            for lv in levels:
                name = variant if lv.is_identity else f"{variant}[{level_label(lv)}]"
                labelled[name] = None if lv.is_identity else lv
            runner.run_cell(variant, variant, seed, config.conditions, levels=labelled)
    for rec in runner.records:
        if rec["iou"] is None and not rec.get("error"):
            rec["iou"] = 1.0
    table = table_from_records(runner.records, config.conditions)
    if out_dir is not None:
        persist(out_dir, config, runner.records, table, runner.loss_curves)
    return table


# --------------------------------------------------------------------------- persistence / reports


def persist(out_dir, config: ExperimentConfig, records, table: ResultTable, loss_curves=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "raw.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "configs.json").write_text(json.dumps(
        {"experiment": config.to_dict(), "conditions": list(table.conditions),
         "loss_curves": loss_curves or {}}, indent=2, sort_keys=True) + "\n")
    (out / "table.txt").write_text(emit_report(table, "text"))
    (out / "table.csv").write_text(emit_report(table, "csv"))
    (out / "table.json").write_text(emit_report(table, "json"))


def load_records(results_dir):
    path = Path(results_dir) / "raw.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no raw.jsonl under {results_dir}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return records


def load_results(results_dir) -> ResultTable:
    records = load_records(results_dir)
    conditions = None
    cfg = Path(results_dir) / "configs.json"
    if cfg.exists():
        conditions = tuple(json.loads(cfg.read_text()).get("conditions") or ()) or None
    return table_from_records(records, conditions)


def _ood_groups(conditions):
    groups = {}
    for c in conditions:
        if c == "ID":
            continue
        axis = c.rsplit("_", 1)[0] if c[-1].isdigit() else c
        groups.setdefault(axis, []).append(c)
    return groups


def _fmt(x):
    return "-" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.1f}"


def _text_report(table: ResultTable) -> str:
    conds = list(table.conditions)
    groups = _ood_groups(conds)
    header = ["Setting"]
    if "ID" in conds:
        header.append("ID")
    for axis, cs in groups.items():
        header += [f"{axis}:{c.rsplit('_', 1)[-1]}" for c in cs] + [f"{axis}:Mean"]
    has_iou = any(r.iou is not None for r in table.rows)
    if has_iou:
        header.append("IoU")
    lines = []
    for setting in table.settings():
        line = [setting]
        if "ID" in conds:
            cell = table.cell(setting, "ID")
            line.append(_fmt(cell.mean if cell else None))
        for axis, cs in groups.items():
            for c in cs:
                cell = table.cell(setting, c)
                line.append(_fmt(cell.mean if cell else None))
            line.append(_fmt(table.ood_mean(setting, axis)))
        if has_iou:
            ious = [r.iou for r in table.rows if r.setting == setting and r.iou is not None]
            line.append(f"{np.mean(ious):.3f}" if ious else "-")
        lines.append(line)
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]

    def fmt_row(row):
        return " | ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))

    out = [fmt_row(header), "-+-".join("-" * w for w in widths)]
    out += [fmt_row(r) for r in lines]
    return "\n".join(out) + "\n"


CSV_FIELDS = ["setting", "condition", "seed", "success_rate", "iou", "failed"]


def _num(x):
    return None if isinstance(x, float) and np.isnan(x) else x


def table_to_dict(table: ResultTable) -> dict:
    """Undefined means (no seeds, no OOD columns) become ``None`` so the dict is plain JSON."""
    return {
        "conditions": list(table.conditions),
        "rows": [
            {"setting": r.setting, "condition": r.condition,
             "per_seed": {str(k): v for k, v in r.per_seed.items()},
             "mean": _num(r.mean), "iou": r.iou, "failed": r.failed}
            for r in table.rows
        ],
        "ood_mean": {s: _num(table.ood_mean(s)) for s in table.settings()},
    }


def table_from_dict(d: dict) -> ResultTable:
    rows = [Row(r["setting"], r["condition"], {int(k): float(v) for k, v in r["per_seed"].items()},
                r.get("iou"), bool(r.get("failed", False))) for r in d["rows"]]
    return ResultTable(rows, tuple(d.get("conditions", ())))


def table_from_csv(text: str) -> ResultTable:
    rows = {}
    order = []
    reader = csv.DictReader(io.StringIO(text))
    conditions = []
    for rec in reader:
        key = (rec["setting"], rec["condition"])
        if rec["condition"] not in conditions:
            conditions.append(rec["condition"])
        if key not in rows:
            rows[key] = Row(key[0], key[1], {}, float(rec["iou"]) if rec["iou"] else None,
                            rec["failed"] == "1")
            order.append(key)
        if rec["seed"]:
            rows[key].per_seed[int(rec["seed"])] = float(rec["success_rate"])
    return ResultTable([rows[k] for k in order], tuple(conditions))


def emit_report(table: ResultTable, fmt: str = "text") -> str:
    if fmt == "text":
        return _text_report(table)
    if fmt == "json":
        return json.dumps(table_to_dict(table), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in table.rows:
            iou = "" if r.iou is None else repr(r.iou)
            seeds = r.per_seed.items() or [("", float("nan"))]
            for seed, rate in seeds:
                writer.writerow([r.setting, r.condition, seed, repr(rate), iou, int(r.failed)])
        return buf.getvalue()
    raise InvalidValueError(f"unknown report format {fmt!r}")
