import dataclasses
import json
import math

import numpy as np
import pytest

from taskobs import evalharness as H
from taskobs import simworld
from taskobs.errors import InvalidValueError
from taskobs.policy import TrainConfig
from taskobs.providers import MaskDegradation
from taskobs.seeding import derive_seed

TINY = H.ExperimentConfig(
    name="tiny", variants=("L0",), conditions=("ID",), seeds=(0,), rollouts_per_seed=2, demos=2,
    max_steps=8, train=TrainConfig(steps=10, batch=8),
)


def _rows(table):
    return [(r.setting, r.condition, r.per_seed, r.iou, r.failed) for r in table.rows]


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(InvalidValueError):
        H.ExperimentConfig(variants=())
    with pytest.raises(InvalidValueError):
        H.ExperimentConfig(conditions=("OOD_SKY",))
    with pytest.raises(InvalidValueError):
        H.ExperimentConfig(rollouts_per_seed=0)
    with pytest.raises(ValueError):
        H.ExperimentConfig(variants=("L9",))


def test_config_defaults():
    cfg = H.ExperimentConfig()
    assert cfg.seeds == (0, 1, 2) and cfg.rollouts_per_seed == 20 and cfg.demos == 50
    assert cfg.conditions[0] == "ID" and len(cfg.conditions) == 7
    assert cfg.train.steps == 5000 and cfg.train.batch == 64


def test_config_json_round_trip(tmp_path):
    cfg = dataclasses.replace(TINY, degradation=MaskDegradation(flip_rate=0.1, seed=3))
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert H.ExperimentConfig.load(path) == cfg
    with pytest.raises(InvalidValueError):
        H.ExperimentConfig.from_dict({**cfg.to_dict(), "bogus": 1})


# ---------------------------------------------------------------- seeds / protocol


def test_seed_streams_are_named_and_distinct():
    cfg = dataclasses.replace(TINY, demos=3, rollouts_per_seed=3)
    demos, evals = H.demo_seeds(cfg, 0), H.eval_seeds(cfg, 0)
    assert demos == [derive_seed(0, "demo", i) for i in range(3)]
    assert evals == [derive_seed(0, "eval", r) for r in range(3)]
    assert not set(demos) & set(evals)
    assert H.eval_seeds(dataclasses.replace(cfg, rollouts_per_seed=5), 0)[:3] == evals


def test_demos_are_id_only_and_successful():
    eps = H.generate_demos(dataclasses.replace(TINY, conditions=("OOD_BG_1",), demos=3), 0)
    assert all(ep.condition == "ID" and ep.success for ep in eps)


def test_training_independent_of_rollout_count(tmp_path):
    a = dataclasses.replace(TINY, rollouts_per_seed=1)
    b = dataclasses.replace(TINY, rollouts_per_seed=3)
    H.run_experiment(a, tmp_path / "a")
    H.run_experiment(b, tmp_path / "b")
    curves = [json.loads((tmp_path / d / "configs.json").read_text())["loss_curves"] for d in "ab"]
    assert curves[0] == curves[1]
    ra, rb = H.load_records(tmp_path / "a"), H.load_records(tmp_path / "b")
    assert ra[0] == rb[0]


# ---------------------------------------------------------------- run_experiment


def test_trivial_experiment_one_row(tmp_path):
    table = H.run_experiment(TINY, tmp_path)
    assert len(table.rows) == 1
    row = table.rows[0]
    assert (row.setting, row.condition) == ("L0", "ID")
    assert row.per_seed[0] in (0.0, 50.0, 100.0)
    for name in ("table.txt", "table.csv", "raw.jsonl", "configs.json"):
        assert (tmp_path / name).exists()
    again = H.run_experiment(TINY)
    assert again == table and _rows(again) == _rows(table)


def test_aggregation_recomputed_from_raw_records(tmp_path):
    cfg = dataclasses.replace(TINY, variants=("ORG", "L1"), conditions=("ID", "OOD_BG_1", "OOD_BG_2"),
                              seeds=(0, 1), rollouts_per_seed=3)
    table = H.run_experiment(cfg, tmp_path)
    records = [json.loads(line) for line in (tmp_path / "raw.jsonl").read_text().splitlines()]
    assert len(records) == 2 * 3 * 2 * 3
    for r in table.rows:
        for seed, rate in r.per_seed.items():
            hits = [x["success"] for x in records
                    if x["setting"] == r.setting and x["condition"] == r.condition and x["seed"] == seed]
            assert len(hits) == 3 and rate == 100.0 * sum(hits) / 3
    for s in table.settings():
        hand = np.mean([table.rate(s, c) for c in ("OOD_BG_1", "OOD_BG_2")])
        assert table.ood_mean(s) == pytest.approx(hand, abs=1e-12)
    assert H.load_results(tmp_path) == table


def test_eval_episodes_paired_across_variants(tmp_path):
    cfg = dataclasses.replace(TINY, variants=("ORG", "L0"), conditions=("ID", "OOD_OBJ_1"))
    H.run_experiment(cfg, tmp_path)
    seeds = {}
    for rec in H.load_records(tmp_path):
        seeds.setdefault((rec["variant"], rec["condition"]), []).append(rec["episode_seed"])
    assert len({tuple(v) for v in seeds.values()}) == 1


def test_stage_failure_is_persisted_with_marker(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("trainer exploded")

    monkeypatch.setattr(H, "train_policy", broken)
    cfg = dataclasses.replace(TINY, conditions=("ID", "OOD_BG_1"))
    table = H.run_experiment(cfg, tmp_path)
    assert all(r.failed and not r.per_seed for r in table.rows)
    records = H.load_records(tmp_path)
    assert all("trainer exploded" in rec["error"] for rec in records)
    assert "-" in (tmp_path / "table.txt").read_text()


def test_parallel_matches_serial():
    cfg = dataclasses.replace(TINY, rollouts_per_seed=4)
    eps = H.generate_demos(cfg, 0)
    pol, _ = H.train_policy(cfg, "L0", 0, eps)
    serial = H.evaluate_policy(pol, cfg, "L0", 0)
    parallel = H.evaluate_policy(pol, cfg, "L0", 0, jobs=2)
    assert serial == parallel


# ---------------------------------------------------------------- ablations


def test_robot_mask_ablation_rows_share_demos(tmp_path):
    table = H.robot_mask_ablation(TINY, tmp_path)
    assert table.settings() == ["Target-only", "Target+Robot"]
    cfg = json.loads((tmp_path / "configs.json").read_text())
    assert set(cfg["loss_curves"]) == {"Target-only/0", "Target+Robot/0"}
    recs = H.load_records(tmp_path)
    by = {}
    for rec in recs:
        by.setdefault(rec["setting"], []).append(rec["episode_seed"])
    assert by["Target-only"] == by["Target+Robot"]


def test_mask_quality_sweep_levels_and_iou():
    cfg = dataclasses.replace(TINY, rollouts_per_seed=3)
    levels = [MaskDegradation(), MaskDegradation(flip_rate=0.01, seed=1),
              MaskDegradation(flip_rate=0.05, seed=1), MaskDegradation(flip_rate=0.3, seed=1)]
    table = H.mask_quality_sweep(cfg, levels)
    assert table.settings() == ["L0", "L0[flip=0.01]", "L0[flip=0.05]", "L0[flip=0.3]"]
    ious = [table.cell(s, "ID").iou for s in table.settings()]
    assert ious[0] == 1.0
    assert all(a > b for a, b in zip(ious, ious[1:]))
    base = H.run_experiment(cfg)
    assert base.cell("L0", "ID").per_seed == table.cell("L0", "ID").per_seed


def test_mask_quality_sweep_preconditions():
    with pytest.raises(InvalidValueError):
        H.mask_quality_sweep(TINY, [MaskDegradation(flip_rate=0.1)])
    with pytest.raises(InvalidValueError):
        H.mask_quality_sweep(TINY, [MaskDegradation(flip_rate=0.1), MaskDegradation(flip_rate=0.2)])
    with pytest.raises(InvalidValueError):
        H.mask_quality_sweep(dataclasses.replace(TINY, variants=("ORG",)),
                             [MaskDegradation(), MaskDegradation(flip_rate=0.1)])


def test_level_labels():
    assert H.level_label(None) == H.level_label(MaskDegradation()) == "clean"
    assert H.level_label(MaskDegradation(flip_rate=0.1, dilation_radius=2)) == "flip=0.1,dil=2"


# ---------------------------------------------------------------- reports


def _table():
    rows = [
        H.Row("ORG", "ID", {0: 100.0, 1: 90.0}),
        H.Row("ORG", "OOD_BG_1", {0: 10.0, 1: 0.0}),
        H.Row("ORG", "OOD_BG_2", {0: 20.0, 1: 30.0}),
        H.Row("L0", "ID", {0: 95.0, 1: 85.0}, iou=0.5),
        H.Row("L0", "OOD_BG_1", {0: 90.0, 1: 80.0}),
        H.Row("L0", "OOD_BG_2", {0: 85.0, 1: 95.0}),
    ]
    return H.ResultTable(rows, ("ID", "OOD_BG_1", "OOD_BG_2"))


def test_empty_table_header_only():
    empty = H.ResultTable([], ())
    text = H.emit_report(empty, "text").splitlines()
    assert len(text) == 2 and text[0].strip() == "Setting"
    assert H.emit_report(empty, "csv") == ",".join(H.CSV_FIELDS) + "\n"
    assert json.loads(H.emit_report(empty, "json"))["rows"] == []


def test_text_report_layout_and_means():
    table = _table()
    lines = H.emit_report(table, "text").splitlines()
    header = [c.strip() for c in lines[0].split("|")]
    assert header == ["Setting", "ID", "OOD_BG:1", "OOD_BG:2", "OOD_BG:Mean", "IoU"]
    org = [c.strip() for c in lines[2].split("|")]
    # ID 95, OOD cells 5 and 25, mean 15
    assert org[:5] == ["ORG", "95.0", "5.0", "25.0", "15.0"]
    assert table.ood_mean("L0") == (85.0 + 90.0) / 2


def test_json_csv_json_round_trip():
    table = _table()
    d1 = json.loads(H.emit_report(table, "json"))
    back = H.table_from_csv(H.emit_report(H.table_from_dict(d1), "csv"))
    d2 = json.loads(H.emit_report(back, "json"))
    assert d1 == d2


def test_csv_carries_per_seed_values():
    lines = H.emit_report(_table(), "csv").splitlines()
    assert lines[0] == "setting,condition,seed,success_rate,iou,failed"
    assert lines[1] == "ORG,ID,0,100.0,,0"
    assert len(lines) == 1 + 12


def test_unknown_format():
    with pytest.raises(InvalidValueError):
        H.emit_report(_table(), "xml")


def test_row_mean_of_empty_row_is_nan():
    assert math.isnan(H.Row("x", "ID", {}).mean)


# ---------------------------------------------------------------- desk-scale directional runs


@pytest.mark.slow
def test_mask_quality_success_tracks_iou():
    cfg = H.ExperimentConfig(variants=("L0",), conditions=("ID",), seeds=(0,), rollouts_per_seed=10)
    levels = [MaskDegradation(), MaskDegradation(flip_rate=0.3, seed=2)]
    table = H.mask_quality_sweep(cfg, levels)
    clean, noisy = table.cell("L0", "ID"), table.cell("L0[flip=0.3]", "ID")
    assert clean.iou > 0.95 and noisy.iou < 0.2
    assert noisy.mean <= clean.mean


def test_expert_rollouts_shared_geometry():
    # paired scenes: same seed, different condition, same geometry
    cfg = dataclasses.replace(TINY, conditions=("ID", "OOD_BG_3"))
    for s in H.eval_seeds(cfg, 0):
        a, b = simworld.sample_scene("ID", s), simworld.sample_scene("OOD_BG_3", s)
        assert a.object_pos == b.object_pos
